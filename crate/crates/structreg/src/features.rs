//! Template-based feature extraction and the model parameter layout.
//!
//! Extraction runs over the full sequence before any decomposition, so
//! window features may span later cut points; mini-samples inherit the
//! extracted vectors by slicing.

use std::fmt;

use crate::corpus::Dataset;
use crate::error::{Error, Result};

const BOS: &str = "<BOS>";
const EOS: &str = "<EOS>";

/// One atomic observation inside a template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Atom {
    /// Surface form at a relative offset, `w[-1]`.
    Word(i32),
    /// First `len` characters of the surface at an offset, `prefix3[0]`.
    Prefix(usize, i32),
    /// Last `len` characters, `suffix2[0]`.
    Suffix(usize, i32),
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Atom::Word(o) => write!(f, "w[{}]", o),
            Atom::Prefix(n, o) => write!(f, "prefix{}[{}]", n, o),
            Atom::Suffix(n, o) => write!(f, "suffix{}[{}]", n, o),
        }
    }
}

/// A node template: atoms conjoined with `|`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub atoms: Vec<Atom>,
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "U:")?;
        for (i, a) in self.atoms.iter().enumerate() {
            if i > 0 {
                write!(f, "|")?;
            }
            write!(f, "{}", a)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub node_templates: Vec<Template>,
    pub use_rich_edges: bool,
}

impl Default for TemplateSet {
    /// Unigrams in a +/-2 window, adjacent bigrams, and prefix/suffix
    /// patterns of length up to 3.
    fn default() -> Self {
        let mut node_templates = Vec::new();
        for o in -2..=2 {
            node_templates.push(Template {
                atoms: vec![Atom::Word(o)],
            });
        }
        for (a, b) in [(-1, 0), (0, 1)] {
            node_templates.push(Template {
                atoms: vec![Atom::Word(a), Atom::Word(b)],
            });
        }
        for n in 1..=3 {
            node_templates.push(Template {
                atoms: vec![Atom::Prefix(n, 0)],
            });
            node_templates.push(Template {
                atoms: vec![Atom::Suffix(n, 0)],
            });
        }
        TemplateSet {
            node_templates,
            use_rich_edges: false,
        }
    }
}

fn parse_atom(s: &str) -> Result<Atom> {
    let open = s
        .find('[')
        .ok_or_else(|| Error::config(format!("bad template atom `{}`", s)))?;
    if !s.ends_with(']') {
        return Err(Error::config(format!("bad template atom `{}`", s)));
    }
    let head = &s[..open];
    let offset: i32 = s[open + 1..s.len() - 1]
        .parse()
        .map_err(|_| Error::config(format!("bad offset in template atom `{}`", s)))?;
    if offset.unsigned_abs() > 16 {
        return Err(Error::config(format!("offset {} exceeds window radius", offset)));
    }
    if head == "w" {
        Ok(Atom::Word(offset))
    } else if let Some(n) = head.strip_prefix("prefix") {
        let n: usize = n
            .parse()
            .map_err(|_| Error::config(format!("bad prefix length in `{}`", s)))?;
        Ok(Atom::Prefix(n, offset))
    } else if let Some(n) = head.strip_prefix("suffix") {
        let n: usize = n
            .parse()
            .map_err(|_| Error::config(format!("bad suffix length in `{}`", s)))?;
        Ok(Atom::Suffix(n, offset))
    } else {
        Err(Error::config(format!("unknown template atom `{}`", s)))
    }
}

impl TemplateSet {
    /// Parse the template mini-language: one spec per line, `U:` for
    /// node templates (atoms joined by `|`), `E:rich` to enable rich
    /// edge features. `#` starts a comment.
    pub fn parse(text: &str) -> Result<TemplateSet> {
        let mut set = TemplateSet {
            node_templates: Vec::new(),
            use_rich_edges: false,
        };
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(spec) = line.strip_prefix("U:") {
                let atoms = spec
                    .split('|')
                    .map(|a| parse_atom(a.trim()))
                    .collect::<Result<Vec<_>>>()?;
                if atoms.is_empty() {
                    return Err(Error::config(format!("empty template `{}`", line)));
                }
                let t = Template { atoms };
                if set.node_templates.contains(&t) {
                    return Err(Error::config(format!("duplicate template `{}`", line)));
                }
                set.node_templates.push(t);
            } else if line == "E:rich" {
                set.use_rich_edges = true;
            } else {
                return Err(Error::config(format!("unknown template line `{}`", line)));
            }
        }
        if set.node_templates.is_empty() {
            return Err(Error::config("template set has no node templates"));
        }
        Ok(set)
    }
}

fn atom_value(atom: &Atom, surfaces: &[&str], pos: usize) -> String {
    let at = |offset: i32| -> Option<&str> {
        let idx = pos as i64 + offset as i64;
        if idx < 0 {
            None
        } else {
            surfaces.get(idx as usize).copied()
        }
    };
    let sentinel = |offset: i32| if (pos as i64 + offset as i64) < 0 { BOS } else { EOS };
    match atom {
        Atom::Word(o) => at(*o).unwrap_or_else(|| sentinel(*o)).to_string(),
        Atom::Prefix(n, o) => match at(*o) {
            Some(s) => s.chars().take(*n).collect(),
            None => sentinel(*o).to_string(),
        },
        Atom::Suffix(n, o) => match at(*o) {
            Some(s) => {
                let chars: Vec<char> = s.chars().collect();
                let start = chars.len().saturating_sub(*n);
                chars[start..].iter().collect()
            }
            None => sentinel(*o).to_string(),
        },
    }
}

/// Fill `features` for every sample. With `freeze`, the feature
/// alphabet is read-only and unseen strings are dropped; otherwise it
/// grows in first-occurrence order.
pub fn extract(ds: &mut Dataset, templates: &TemplateSet, freeze: bool) -> Result<()> {
    if freeze && !ds.feature_alphabet.is_frozen() {
        ds.feature_alphabet.freeze();
    }
    let mut samples = std::mem::take(&mut ds.samples);
    for sample in &mut samples {
        let surfaces: Vec<&str> = sample.tokens.iter().map(|t| t.surface.as_str()).collect();
        let n = surfaces.len();
        let mut features = Vec::with_capacity(n);
        let mut name = String::new();
        for pos in 0..n {
            let mut ids: Vec<u32> = Vec::with_capacity(templates.node_templates.len());
            for (ti, t) in templates.node_templates.iter().enumerate() {
                name.clear();
                name.push('T');
                name.push_str(&ti.to_string());
                for atom in &t.atoms {
                    name.push(':');
                    name.push_str(&atom_value(atom, &surfaces, pos));
                }
                if let Some(id) = ds.feature_alphabet.intern(&name) {
                    ids.push(id);
                }
            }
            ids.sort_unstable();
            ids.dedup();
            features.push(ids.into_iter().map(|id| (id, 1.0)).collect());
        }
        sample.features = features;
    }
    ds.samples = samples;
    Ok(())
}

/// Largest absolute feature value in the dataset (the bound `v`).
pub fn max_abs_feature_value(ds: &Dataset) -> f64 {
    ds.samples
        .iter()
        .flat_map(|s| s.features.iter())
        .flat_map(|fv| fv.iter())
        .map(|&(_, v)| v.abs())
        .fold(0.0, f64::max)
}

/// Block coordinates of one parameter index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamIndex {
    /// Node weight for (feature, label).
    Node { feature: usize, label: usize },
    /// Transition bias for (prev_label, label).
    Trans { prev: usize, label: usize },
    /// Rich edge weight for (feature, prev_label, label).
    Edge {
        feature: usize,
        prev: usize,
        label: usize,
    },
}

/// Dense parameter layout shared by the CRF and the perceptron:
/// a node block of size `d * |Y|`, a transition-bias block `|Y| * |Y|`,
/// and, with rich edges, an edge block `d * |Y| * |Y|`. The initial
/// position of a (mini-)sample has no incoming transition; its score is
/// the node score alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub num_features: usize,
    pub num_labels: usize,
    pub rich_edges: bool,
}

impl Layout {
    pub fn new(num_features: usize, num_labels: usize, rich_edges: bool) -> Result<Layout> {
        let l = Layout {
            num_features,
            num_labels,
            rich_edges,
        };
        l.checked_total()
            .ok_or_else(|| Error::config("parameter layout overflows index arithmetic"))?;
        Ok(l)
    }

    fn checked_total(&self) -> Option<usize> {
        let y = self.num_labels;
        let node = self.num_features.checked_mul(y)?;
        let trans = y.checked_mul(y)?;
        let edge = if self.rich_edges {
            self.num_features.checked_mul(y)?.checked_mul(y)?
        } else {
            0
        };
        node.checked_add(trans)?.checked_add(edge)
    }

    pub fn total(&self) -> usize {
        self.checked_total().expect("validated at construction")
    }

    #[inline]
    pub fn node(&self, feature: usize, label: usize) -> usize {
        feature * self.num_labels + label
    }

    #[inline]
    pub fn trans(&self, prev: usize, label: usize) -> usize {
        self.num_features * self.num_labels + prev * self.num_labels + label
    }

    #[inline]
    pub fn edge(&self, feature: usize, prev: usize, label: usize) -> usize {
        debug_assert!(self.rich_edges);
        let y = self.num_labels;
        self.num_features * y + y * y + (feature * y + prev) * y + label
    }

    pub fn decode(&self, index: usize) -> Option<ParamIndex> {
        let y = self.num_labels;
        let node_end = self.num_features * y;
        let trans_end = node_end + y * y;
        if index < node_end {
            Some(ParamIndex::Node {
                feature: index / y,
                label: index % y,
            })
        } else if index < trans_end {
            let r = index - node_end;
            Some(ParamIndex::Trans {
                prev: r / y,
                label: r % y,
            })
        } else if self.rich_edges && index < self.total() {
            let r = index - trans_end;
            Some(ParamIndex::Edge {
                feature: r / (y * y),
                prev: (r / y) % y,
                label: r % y,
            })
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{read_conll, ConllSchema};
    use std::io::BufReader;

    fn toy(text: &str) -> Dataset {
        read_conll(BufReader::new(text.as_bytes()), &ConllSchema::default()).unwrap()
    }

    #[test]
    fn identity_template_shares_ids() {
        let mut ds = toy("a\tX\nb\tX\na\tX\n");
        let t = TemplateSet::parse("U:w[0]").unwrap();
        extract(&mut ds, &t, false).unwrap();
        let s = &ds.samples[0];
        assert_eq!(s.features[0], s.features[2]);
        assert_ne!(s.features[0], s.features[1]);
        assert_eq!(ds.feature_alphabet.len(), 2);
    }

    #[test]
    fn boundary_sentinel() {
        let mut ds = toy("a\tX\nb\tX\n");
        let t = TemplateSet::parse("U:w[-1]").unwrap();
        extract(&mut ds, &t, false).unwrap();
        let id0 = ds.samples[0].features[0][0].0;
        let id1 = ds.samples[0].features[1][0].0;
        assert!(ds.feature_alphabet.string(id0).unwrap().contains("<BOS>"));
        assert!(ds.feature_alphabet.string(id1).unwrap().contains(":a"));
    }

    #[test]
    fn extraction_deterministic() {
        let text = "alpha\tX\nbeta\tY\ngamma\tX\n";
        let t = TemplateSet::default();
        let mut d1 = toy(text);
        let mut d2 = toy(text);
        extract(&mut d1, &t, false).unwrap();
        extract(&mut d2, &t, false).unwrap();
        let a1: Vec<_> = d1.feature_alphabet.iter().collect();
        let a2: Vec<_> = d2.feature_alphabet.iter().collect();
        assert_eq!(a1, a2);
    }

    #[test]
    fn frozen_extraction_drops_unseen() {
        let t = TemplateSet::parse("U:w[0]").unwrap();
        let mut train = toy("a\tX\nb\tY\n");
        extract(&mut train, &t, false).unwrap();
        let mut test = toy("a\tX\nzzz\tY\n");
        test.feature_alphabet = train.feature_alphabet.clone();
        extract(&mut test, &t, true).unwrap();
        assert_eq!(test.samples[0].features[0].len(), 1);
        assert!(test.samples[0].features[1].is_empty());
    }

    #[test]
    fn locality_within_radius() {
        let t = TemplateSet::default(); // radius 2
        let base = {
            let mut ds = toy("a\tX\nb\tX\nc\tX\nd\tX\ne\tX\nf\tX\ng\tX\n");
            extract(&mut ds, &t, false).unwrap();
            ds
        };
        // share the alphabet so equal feature strings keep equal ids
        let changed = {
            let mut ds = toy("a\tX\nb\tX\nc\tX\nZ\tX\ne\tX\nf\tX\ng\tX\n");
            ds.feature_alphabet = base.feature_alphabet.clone();
            extract(&mut ds, &t, false).unwrap();
            ds
        };
        // position 3 changed; positions 0 and 6 are outside the window
        assert_eq!(base.samples[0].features[0], changed.samples[0].features[0]);
        assert_eq!(base.samples[0].features[6], changed.samples[0].features[6]);
        assert_ne!(base.samples[0].features[3], changed.samples[0].features[3]);
    }

    #[test]
    fn parse_round_trip_and_errors() {
        let t = TemplateSet::parse("U:w[-1]|w[0]\nU:prefix3[0]\nE:rich\n").unwrap();
        assert_eq!(t.node_templates.len(), 2);
        assert!(t.use_rich_edges);
        assert!(TemplateSet::parse("U:w[-1]\nU:w[-1]").is_err());
        assert!(TemplateSet::parse("Q:w[0]").is_err());
        assert!(TemplateSet::parse("U:w[oops]").is_err());
    }

    #[test]
    fn layout_counts() {
        let plain = Layout::new(3, 2, false).unwrap();
        assert_eq!(plain.total(), 10);
        let rich = Layout::new(3, 2, true).unwrap();
        assert_eq!(rich.total(), 22);
    }

    #[test]
    fn layout_round_trip_exhaustive() {
        for rich in [false, true] {
            let l = Layout::new(4, 3, rich).unwrap();
            for idx in 0..l.total() {
                let back = match l.decode(idx).unwrap() {
                    ParamIndex::Node { feature, label } => l.node(feature, label),
                    ParamIndex::Trans { prev, label } => l.trans(prev, label),
                    ParamIndex::Edge {
                        feature,
                        prev,
                        label,
                    } => l.edge(feature, prev, label),
                };
                assert_eq!(back, idx);
            }
            assert_eq!(l.decode(l.total()), None);
        }
    }

    #[test]
    fn layout_overflow_is_config_error() {
        assert!(Layout::new(usize::MAX / 2, 8, true).is_err());
    }

    #[test]
    fn max_value_tracks_rescans() {
        let mut ds = toy("a\tX\nb\tY\n");
        extract(&mut ds, &TemplateSet::default(), false).unwrap();
        assert_eq!(max_abs_feature_value(&ds), 1.0);
    }
}
