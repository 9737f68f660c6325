//! Data model for samples and datasets, CoNLL I/O, alphabets, and a
//! seeded synthetic corpus generator.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Sparse feature vector: `(feature_id, value)` pairs with strictly
/// increasing ids.
pub type SparseVec = Vec<(u32, f64)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub surface: String,
    pub attributes: Vec<String>,
}

impl Token {
    pub fn new(surface: impl Into<String>) -> Self {
        Token {
            surface: surface.into(),
            attributes: Vec::new(),
        }
    }
}

/// One training/test sequence: observations, per-position sparse
/// feature vectors, and gold label ids. All three have equal length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<Token>,
    pub features: Vec<SparseVec>,
    pub gold: Vec<u32>,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.gold.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gold.is_empty()
    }
}

/// Bijection between strings and dense u32 ids, assigned in
/// first-occurrence order. Once frozen, unseen strings stay absent.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Alphabet {
    items: Vec<String>,
    index: HashMap<String, u32>,
    frozen: bool,
}

impl Alphabet {
    pub fn new() -> Self {
        Alphabet::default()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn lookup(&self, s: &str) -> Option<u32> {
        self.index.get(s).copied()
    }

    pub fn string(&self, id: u32) -> Option<&str> {
        self.items.get(id as usize).map(String::as_str)
    }

    /// Id of `s`, inserting it if the alphabet is still growing.
    pub fn intern(&mut self, s: &str) -> Option<u32> {
        if let Some(&id) = self.index.get(s) {
            return Some(id);
        }
        if self.frozen {
            return None;
        }
        let id = self.items.len() as u32;
        self.items.push(s.to_string());
        self.index.insert(s.to_string(), id);
        Some(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(String::as_str)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub label_alphabet: Alphabet,
    pub feature_alphabet: Alphabet,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_tokens(&self) -> usize {
        self.samples.iter().map(Sample::len).sum()
    }

    pub fn mean_length(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            self.num_tokens() as f64 / self.samples.len() as f64
        }
    }

    pub fn freeze(&mut self) {
        self.label_alphabet.freeze();
        self.feature_alphabet.freeze();
    }
}

/// Column layout of a CoNLL file. The tag column defaults to the last
/// column; everything between the surface (first column) and the tag
/// becomes token attributes.
#[derive(Debug, Clone, Default)]
pub struct ConllSchema {
    pub tag_column: Option<usize>,
}

/// Read blank-line-separated one-token-per-line text. Feature vectors
/// are left empty; the `features` module fills them.
pub fn read_conll<R: BufRead>(reader: R, schema: &ConllSchema) -> Result<Dataset> {
    let mut ds = Dataset {
        samples: Vec::new(),
        label_alphabet: Alphabet::new(),
        feature_alphabet: Alphabet::new(),
    };
    let mut width: Option<usize> = None;
    let mut tokens: Vec<Token> = Vec::new();
    let mut gold: Vec<u32> = Vec::new();

    let flush = |tokens: &mut Vec<Token>, gold: &mut Vec<u32>, ds: &mut Dataset| {
        if !tokens.is_empty() {
            ds.samples.push(Sample {
                tokens: std::mem::take(tokens),
                features: Vec::new(),
                gold: std::mem::take(gold),
            });
        }
    };

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line_1 = lineno + 1;
        if line.trim().is_empty() {
            flush(&mut tokens, &mut gold, &mut ds);
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        match width {
            None => {
                if cols.len() < 2 {
                    return Err(Error::Format {
                        line: line_1,
                        msg: format!("expected at least 2 columns, got {}", cols.len()),
                    });
                }
                width = Some(cols.len());
            }
            Some(w) if cols.len() != w => {
                return Err(Error::Format {
                    line: line_1,
                    msg: format!("expected {} columns, got {}", w, cols.len()),
                });
            }
            _ => {}
        }
        let w = cols.len();
        let tag_col = schema.tag_column.unwrap_or(w - 1);
        if tag_col >= w || tag_col == 0 {
            return Err(Error::Format {
                line: line_1,
                msg: format!("tag column {} out of range for width {}", tag_col, w),
            });
        }
        let label = ds
            .label_alphabet
            .intern(cols[tag_col])
            .ok_or_else(|| Error::data(format!("unknown label `{}` at line {}", cols[tag_col], line_1)))?;
        let attributes = cols[1..]
            .iter()
            .enumerate()
            .filter(|(i, _)| i + 1 != tag_col)
            .map(|(_, c)| c.to_string())
            .collect();
        tokens.push(Token {
            surface: cols[0].to_string(),
            attributes,
        });
        gold.push(label);
    }
    flush(&mut tokens, &mut gold, &mut ds);
    Ok(ds)
}

/// Write tokens and gold tags back out, one token per line, blank line
/// between samples. `predicted` (one tag sequence per sample), when
/// present, is appended as an extra column.
pub fn write_conll<W: Write>(
    w: &mut W,
    ds: &Dataset,
    predicted: Option<&[Vec<u32>]>,
) -> Result<()> {
    for (i, s) in ds.samples.iter().enumerate() {
        for (k, tok) in s.tokens.iter().enumerate() {
            write!(w, "{}", tok.surface)?;
            for a in &tok.attributes {
                write!(w, "\t{}", a)?;
            }
            let gold = ds
                .label_alphabet
                .string(s.gold[k])
                .ok_or_else(|| Error::data(format!("gold label id {} out of range", s.gold[k])))?;
            write!(w, "\t{}", gold)?;
            if let Some(pred) = predicted {
                let p = ds
                    .label_alphabet
                    .string(pred[i][k])
                    .ok_or_else(|| Error::data("predicted label id out of range".to_string()))?;
                write!(w, "\t{}", p)?;
            }
            writeln!(w)?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Parameters of the synthetic first-order HMM corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_labels: usize,
    pub vocab_size: usize,
    pub mean_length: f64,
    pub num_samples: usize,
    pub transition_sharpness: f64,
    pub emission_sharpness: f64,
    pub noise_rate: f64,
    pub seed: u64,
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.num_labels < 2 {
            return Err(Error::config("num_labels must be >= 2"));
        }
        if self.vocab_size == 0 {
            return Err(Error::config("vocab_size must be positive"));
        }
        if self.mean_length < 1.0 {
            return Err(Error::config("mean_length must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::config("noise_rate must be in [0,1]"));
        }
        if self.transition_sharpness <= 0.0 || self.emission_sharpness <= 0.0 {
            return Err(Error::config("sharpness parameters must be positive"));
        }
        Ok(())
    }
}

/// Normalized categorical row with weight exp(sharpness * u), u ~ U(0,1).
/// Larger sharpness concentrates mass on a few entries.
fn random_row<R: Rng>(rng: &mut R, size: usize, sharpness: f64) -> Vec<f64> {
    let mut row: Vec<f64> = (0..size)
        .map(|_| (sharpness * rng.gen::<f64>()).exp())
        .collect();
    let z: f64 = row.iter().sum();
    for x in &mut row {
        *x /= z;
    }
    row
}

fn draw_categorical<R: Rng>(rng: &mut R, row: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    row.len() - 1
}

/// Draw a dataset from a fixed first-order HMM, deterministically for a
/// given spec.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut ds = Dataset {
        samples: Vec::new(),
        label_alphabet: Alphabet::new(),
        feature_alphabet: Alphabet::new(),
    };
    for y in 0..spec.num_labels {
        ds.label_alphabet.intern(&format!("y{}", y));
    }

    let mut model_rng = rng::stream(spec.seed, &[0x4d4f44]);
    let initial = random_row(&mut model_rng, spec.num_labels, spec.transition_sharpness);
    let transitions: Vec<Vec<f64>> = (0..spec.num_labels)
        .map(|_| random_row(&mut model_rng, spec.num_labels, spec.transition_sharpness))
        .collect();
    let emissions: Vec<Vec<f64>> = (0..spec.num_labels)
        .map(|_| random_row(&mut model_rng, spec.vocab_size, spec.emission_sharpness))
        .collect();

    for i in 0..spec.num_samples {
        let mut srng = rng::stream(spec.seed, &[0x53414d, i as u64]);
        let n = if spec.mean_length > 1.0 {
            let pois = Poisson::new(spec.mean_length - 1.0)
                .map_err(|e| Error::config(format!("bad mean_length: {}", e)))?;
            pois.sample(&mut srng) as usize + 1
        } else {
            1
        };
        let mut tokens = Vec::with_capacity(n);
        let mut gold = Vec::with_capacity(n);
        let mut state = draw_categorical(&mut srng, &initial);
        for k in 0..n {
            if k > 0 {
                state = draw_categorical(&mut srng, &transitions[state]);
            }
            let mut word = draw_categorical(&mut srng, &emissions[state]);
            if spec.noise_rate > 0.0 && srng.gen::<f64>() < spec.noise_rate {
                word = srng.gen_range(0..spec.vocab_size);
            }
            tokens.push(Token::new(format!("w{}", word)));
            gold.push(state as u32);
        }
        ds.samples.push(Sample {
            tokens,
            features: Vec::new(),
            gold,
        });
    }
    Ok(ds)
}

/// Seeded shuffle then split. The first half gets `floor(m * fraction)`
/// samples; both halves share the parent's (frozen) alphabets.
pub fn split_dataset(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if ds.is_empty() {
        return Err(Error::data("cannot split an empty dataset"));
    }
    if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
        return Err(Error::config("split fraction must be in (0,1)"));
    }
    let m = ds.len();
    let first = (m as f64 * fraction).floor() as usize;
    if first == 0 || first == m {
        return Err(Error::config(format!(
            "fraction {} produces an empty half for m={}",
            fraction, m
        )));
    }
    let mut order: Vec<usize> = (0..m).collect();
    let mut r = rng::stream(seed, &[0x53504c49]);
    // Fisher-Yates
    for i in (1..m).rev() {
        let j = r.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut a = Alphabet::clone(&ds.label_alphabet);
    let mut f = Alphabet::clone(&ds.feature_alphabet);
    a.freeze();
    f.freeze();
    let mk = |idx: &[usize]| Dataset {
        samples: idx.iter().map(|&i| ds.samples[i].clone()).collect(),
        label_alphabet: a.clone(),
        feature_alphabet: f.clone(),
    };
    Ok((mk(&order[..first]), mk(&order[first..])))
}

const CACHE_MAGIC: &[u8; 4] = b"SRDS";
const CACHE_VERSION: u32 = 1;

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn write_alphabet(buf: &mut Vec<u8>, a: &Alphabet) {
    buf.extend_from_slice(&(a.len() as u32).to_le_bytes());
    buf.push(a.is_frozen() as u8);
    for s in a.iter() {
        write_str(buf, s);
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::data("truncated dataset cache"));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::data("invalid UTF-8 in cache"))
    }
}

fn read_alphabet(c: &mut Cursor) -> Result<Alphabet> {
    let n = c.u32()? as usize;
    let frozen = c.take(1)?[0] != 0;
    let mut a = Alphabet::new();
    for _ in 0..n {
        let s = c.string()?;
        a.intern(&s);
    }
    if frozen {
        a.freeze();
    }
    Ok(a)
}

/// Versioned binary serialization of a dataset, including extracted
/// features and alphabets.
pub fn write_cache(ds: &Dataset) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    write_alphabet(&mut buf, &ds.label_alphabet);
    write_alphabet(&mut buf, &ds.feature_alphabet);
    buf.extend_from_slice(&(ds.samples.len() as u32).to_le_bytes());
    for s in &ds.samples {
        buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
        for tok in &s.tokens {
            write_str(&mut buf, &tok.surface);
            buf.extend_from_slice(&(tok.attributes.len() as u32).to_le_bytes());
            for a in &tok.attributes {
                write_str(&mut buf, a);
            }
        }
        let has_features = !s.features.is_empty();
        buf.push(has_features as u8);
        if has_features {
            for fv in &s.features {
                buf.extend_from_slice(&(fv.len() as u32).to_le_bytes());
                for &(id, v) in fv {
                    buf.extend_from_slice(&id.to_le_bytes());
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        for &g in &s.gold {
            buf.extend_from_slice(&g.to_le_bytes());
        }
    }
    buf
}

pub fn read_cache(data: &[u8]) -> Result<Dataset> {
    let mut c = Cursor { data, pos: 0 };
    if c.take(4)? != CACHE_MAGIC {
        return Err(Error::data("not a dataset cache (bad magic)"));
    }
    let version = c.u32()?;
    if version != CACHE_VERSION {
        return Err(Error::data(format!(
            "unsupported cache version {}",
            version
        )));
    }
    let label_alphabet = read_alphabet(&mut c)?;
    let feature_alphabet = read_alphabet(&mut c)?;
    let m = c.u32()? as usize;
    let mut samples = Vec::with_capacity(m);
    for _ in 0..m {
        let n = c.u32()? as usize;
        let mut tokens = Vec::with_capacity(n);
        for _ in 0..n {
            let surface = c.string()?;
            let na = c.u32()? as usize;
            let mut attributes = Vec::with_capacity(na);
            for _ in 0..na {
                attributes.push(c.string()?);
            }
            tokens.push(Token {
                surface,
                attributes,
            });
        }
        let has_features = c.take(1)?[0] != 0;
        let mut features = Vec::new();
        if has_features {
            for _ in 0..n {
                let nf = c.u32()? as usize;
                let mut fv = Vec::with_capacity(nf);
                for _ in 0..nf {
                    let id = c.u32()?;
                    let v = c.f64()?;
                    fv.push((id, v));
                }
                features.push(fv);
            }
        }
        let mut gold = Vec::with_capacity(n);
        for _ in 0..n {
            gold.push(c.u32()?);
        }
        samples.push(Sample {
            tokens,
            features,
            gold,
        });
    }
    Ok(Dataset {
        samples,
        label_alphabet,
        feature_alphabet,
    })
}

/// Shared read-only dataset handle used by concurrent sweep/probe runs.
pub type SharedDataset = Arc<Dataset>;

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::BufReader;

    fn read(text: &str) -> Result<Dataset> {
        read_conll(BufReader::new(text.as_bytes()), &ConllSchema::default())
    }

    #[test]
    fn two_blocks() {
        let ds = read("a\tX\nb\tY\nc\tX\n\nd\tY\ne\tX\n").unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.samples[0].len(), 3);
        assert_eq!(ds.samples[1].len(), 2);
        assert_eq!(ds.label_alphabet.len(), 2);
    }

    #[test]
    fn ragged_columns_error_names_line() {
        let err = read("a\tX\nb\tY\textra\n").unwrap_err();
        match err {
            Error::Format { line, .. } => assert_eq!(line, 2),
            other => panic!("expected format error, got {:?}", other),
        }
    }

    #[test]
    fn empty_input_is_empty_dataset() {
        let ds = read("").unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn zero_line_blocks_skipped() {
        let ds = read("\n\na\tX\n\n\n").unwrap();
        assert_eq!(ds.len(), 1);
    }

    #[test]
    fn reread_identical_alphabets() {
        let text = "foo\tA\nbar\tB\n\nbaz\tA\n";
        let d1 = read(text).unwrap();
        let d2 = read(text).unwrap();
        let ids1: Vec<_> = d1.label_alphabet.iter().collect();
        let ids2: Vec<_> = d2.label_alphabet.iter().collect();
        assert_eq!(ids1, ids2);
    }

    #[test]
    fn conll_round_trip_preserves_content() {
        let text = "a   X\nb\tY\n\nc X\n";
        let ds = read(text).unwrap();
        let mut out = Vec::new();
        write_conll(&mut out, &ds, None).unwrap();
        let ds2 = read(std::str::from_utf8(&out).unwrap()).unwrap();
        assert_eq!(ds.samples, ds2.samples);
    }

    fn small_spec() -> SynthSpec {
        SynthSpec {
            num_labels: 3,
            vocab_size: 20,
            mean_length: 5.0,
            num_samples: 10,
            transition_sharpness: 5.0,
            emission_sharpness: 5.0,
            noise_rate: 0.0,
            seed: 42,
        }
    }

    #[test]
    fn synthetic_empty() {
        let spec = SynthSpec {
            num_samples: 0,
            ..small_spec()
        };
        assert!(generate_synthetic(&spec).unwrap().is_empty());
    }

    #[test]
    fn synthetic_deterministic() {
        let a = generate_synthetic(&small_spec()).unwrap();
        let b = generate_synthetic(&small_spec()).unwrap();
        assert_eq!(write_cache(&a), write_cache(&b));
    }

    #[test]
    fn synthetic_min_length_one() {
        let spec = SynthSpec {
            mean_length: 1.0,
            ..small_spec()
        };
        let ds = generate_synthetic(&spec).unwrap();
        assert!(ds.samples.iter().all(|s| s.len() == 1));
    }

    #[test]
    fn split_halves() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        let (a, b) = split_dataset(&ds, 0.5, 1).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(b.len(), 5);
        assert!(a.label_alphabet.is_frozen());
    }

    #[test]
    fn split_rounds_down() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        let (a, b) = split_dataset(&ds, 0.99, 1).unwrap();
        assert_eq!((a.len(), b.len()), (9, 1));
    }

    #[test]
    fn split_deterministic() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        let (a1, _) = split_dataset(&ds, 0.5, 7).unwrap();
        let (a2, _) = split_dataset(&ds, 0.5, 7).unwrap();
        assert_eq!(write_cache(&a1), write_cache(&a2));
    }

    #[test]
    fn split_empty_half_is_error() {
        let mut ds = generate_synthetic(&small_spec()).unwrap();
        ds.samples.truncate(1);
        assert!(split_dataset(&ds, 0.5, 1).is_err());
    }

    #[test]
    fn cache_round_trip() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        let bytes = write_cache(&ds);
        let back = read_cache(&bytes).unwrap();
        assert_eq!(write_cache(&back), bytes);
    }

    #[test]
    fn frozen_alphabet_rejects_new() {
        let mut a = Alphabet::new();
        a.intern("x");
        a.freeze();
        assert_eq!(a.intern("x"), Some(0));
        assert_eq!(a.intern("y"), None);
    }
}
