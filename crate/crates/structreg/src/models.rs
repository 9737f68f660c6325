//! Linear-chain CRF (log-space forward-backward, marginals, gradient,
//! Viterbi) and the averaged structured perceptron, sharing one dense
//! parameter layout.

use std::collections::HashMap;
use std::io::{Read, Write};

use crate::corpus::{Alphabet, SparseVec};
use crate::error::{Error, Result};
use crate::features::Layout;

/// Trained model: dense weights over [`Layout`] plus the alphabets
/// needed to decode new text.
#[derive(Debug, Clone)]
pub struct Model {
    pub weights: Vec<f64>,
    pub layout: Layout,
    pub label_alphabet: Alphabet,
    pub feature_alphabet: Alphabet,
}

impl Model {
    pub fn zeros(layout: Layout, label_alphabet: Alphabet, feature_alphabet: Alphabet) -> Model {
        Model {
            weights: vec![0.0; layout.total()],
            layout,
            label_alphabet,
            feature_alphabet,
        }
    }

    pub fn num_labels(&self) -> usize {
        self.layout.num_labels
    }

    pub fn viterbi(&self, feats: &[SparseVec]) -> Result<(Vec<u32>, f64)> {
        viterbi(&self.layout, &self.weights, 1.0, feats)
    }

    /// Marginal probability of the gold label at position `k`; the
    /// real-valued per-position output probed by the stability lab.
    pub fn stability_value(&self, feats: &[SparseVec], gold: &[u32], k: usize) -> Result<f64> {
        let mut lat = score_lattice(&self.layout, &self.weights, 1.0, feats)?;
        forward_backward(&mut lat)?;
        Ok(lat.node_marginal(k, gold[k] as usize))
    }
}

thread_local! {
    /// Recycled lattice buffers. SGD on decomposed datasets builds
    /// thousands of short-lived lattices per epoch; reusing their
    /// allocations keeps the per-mini-sample overhead flat.
    static LATTICE_POOL: std::cell::RefCell<Vec<Vec<f64>>> =
        const { std::cell::RefCell::new(Vec::new()) };
}

fn pooled_zeroed(len: usize) -> Vec<f64> {
    let recycled = LATTICE_POOL.with(|p| p.borrow_mut().pop());
    match recycled {
        Some(mut v) => {
            v.clear();
            v.resize(len, 0.0);
            v
        }
        None => vec![0.0; len],
    }
}

impl Drop for Lattice {
    fn drop(&mut self) {
        LATTICE_POOL.with(|p| {
            let mut pool = p.borrow_mut();
            for v in [
                std::mem::take(&mut self.node),
                std::mem::take(&mut self.edge),
                std::mem::take(&mut self.alpha),
                std::mem::take(&mut self.beta),
            ] {
                if v.capacity() > 0 && pool.len() < 64 {
                    pool.push(v);
                }
            }
        });
    }
}

/// Per-sequence inference scratch: log-potentials, forward/backward
/// tables, and the log partition function.
#[derive(Debug, Clone)]
pub struct Lattice {
    pub n: usize,
    pub num_labels: usize,
    /// `n * |Y|` node log-potentials, index `k * |Y| + y`.
    pub node: Vec<f64>,
    /// Edge log-potentials; the edge into position `k` (k >= 1) lives at
    /// `(k-1) * edge_stride + prev * |Y| + y`. Without rich edge features
    /// every position shares one `|Y|^2` block (`edge_stride` = 0); with
    /// them each position has its own block (`edge_stride` = `|Y|^2`).
    pub edge: Vec<f64>,
    /// 0 when the edge block is shared across positions, `|Y|^2` otherwise.
    pub edge_stride: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub log_z: f64,
}

impl Lattice {
    #[inline]
    fn node_at(&self, k: usize, y: usize) -> f64 {
        self.node[k * self.num_labels + y]
    }

    #[inline]
    fn edge_at(&self, k: usize, prev: usize, y: usize) -> f64 {
        let yn = self.num_labels;
        self.edge[(k - 1) * self.edge_stride + prev * yn + y]
    }

    /// P(y at position k), valid after `forward_backward`.
    pub fn node_marginal(&self, k: usize, y: usize) -> f64 {
        let yn = self.num_labels;
        (self.alpha[k * yn + y] + self.beta[k * yn + y] - self.log_z).exp()
    }

    /// P(prev at k-1, y at k) for k >= 1, valid after `forward_backward`.
    pub fn pair_marginal(&self, k: usize, prev: usize, y: usize) -> f64 {
        let yn = self.num_labels;
        (self.alpha[(k - 1) * yn + prev]
            + self.edge_at(k, prev, y)
            + self.node_at(k, y)
            + self.beta[k * yn + y]
            - self.log_z)
            .exp()
    }

    /// Log-potential sum of one complete label path.
    pub fn path_score(&self, labels: &[u32]) -> f64 {
        let mut s = self.node_at(0, labels[0] as usize);
        for k in 1..self.n {
            s += self.edge_at(k, labels[k - 1] as usize, labels[k] as usize)
                + self.node_at(k, labels[k] as usize);
        }
        s
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Fill node and edge log-potentials from the weights (scaled by
/// `scale`, so lazily L2-shrunk weight vectors can be scored without
/// materializing them). The initial position has no incoming edge.
pub fn score_lattice(
    layout: &Layout,
    weights: &[f64],
    scale: f64,
    feats: &[SparseVec],
) -> Result<Lattice> {
    let n = feats.len();
    let yn = layout.num_labels;
    if n == 0 {
        return Err(Error::data("cannot score an empty sequence"));
    }
    let mut node = pooled_zeroed(n * yn);
    for (k, fv) in feats.iter().enumerate() {
        for &(f, v) in fv {
            let f = f as usize;
            if f >= layout.num_features {
                return Err(Error::data(format!(
                    "feature id {} out of range for layout with d={}",
                    f, layout.num_features
                )));
            }
            for y in 0..yn {
                node[k * yn + y] += weights[layout.node(f, y)] * v;
            }
        }
    }
    // Without rich edge features the edge block is the bare transition
    // matrix at every position, so one shared |Y|^2 block suffices.
    let (edge_stride, mut edge) = if layout.rich_edges {
        (yn * yn, pooled_zeroed(n.saturating_sub(1) * yn * yn))
    } else {
        (0, pooled_zeroed(if n > 1 { yn * yn } else { 0 }))
    };
    if n > 1 {
        let positions = if layout.rich_edges { n } else { 2 };
        for k in 1..positions {
            let base = (k - 1) * edge_stride;
            for prev in 0..yn {
                for y in 0..yn {
                    edge[base + prev * yn + y] = weights[layout.trans(prev, y)];
                }
            }
            if layout.rich_edges {
                for &(f, v) in &feats[k] {
                    let f = f as usize;
                    for prev in 0..yn {
                        for y in 0..yn {
                            edge[base + prev * yn + y] += weights[layout.edge(f, prev, y)] * v;
                        }
                    }
                }
            }
        }
    }
    if scale != 1.0 {
        for x in &mut node {
            *x *= scale;
        }
        for x in &mut edge {
            *x *= scale;
        }
    }
    Ok(Lattice {
        n,
        num_labels: yn,
        node,
        edge,
        edge_stride,
        alpha: Vec::new(),
        beta: Vec::new(),
        log_z: f64::NAN,
    })
}

/// Log-space forward and backward recursions; fills `alpha`, `beta`,
/// `log_z`.
pub fn forward_backward(lat: &mut Lattice) -> Result<()> {
    let n = lat.n;
    let yn = lat.num_labels;
    let mut alpha = pooled_zeroed(n * yn);
    let mut beta = pooled_zeroed(n * yn);
    let mut scratch = vec![0.0; yn];

    alpha[..yn].copy_from_slice(&lat.node[..yn]);
    for k in 1..n {
        for y in 0..yn {
            for (prev, s) in scratch.iter_mut().enumerate() {
                *s = alpha[(k - 1) * yn + prev] + lat.edge_at(k, prev, y);
            }
            alpha[k * yn + y] = lat.node_at(k, y) + log_sum_exp(&scratch);
        }
    }
    for k in (0..n - 1).rev() {
        for y in 0..yn {
            for (next, s) in scratch.iter_mut().enumerate() {
                *s = lat.edge_at(k + 1, y, next) + lat.node_at(k + 1, next) + beta[(k + 1) * yn + next];
            }
            beta[k * yn + y] = log_sum_exp(&scratch);
        }
    }
    let log_z = log_sum_exp(&alpha[(n - 1) * yn..n * yn]);
    for (k, chunk) in alpha.chunks(yn).chain(beta.chunks(yn)).enumerate() {
        if chunk.iter().any(|x| x.is_nan()) {
            return Err(Error::numerical(format!(
                "NaN in forward/backward table near position {}",
                k % n
            )));
        }
    }
    if !log_z.is_finite() {
        return Err(Error::numerical("non-finite log partition function"));
    }
    lat.alpha = alpha;
    lat.beta = beta;
    lat.log_z = log_z;
    Ok(())
}

/// Negative log-likelihood of the gold path and its gradient (expected
/// minus observed feature counts), sparse over the parameters touched
/// by this sequence.
/// Negative log-likelihood only (no gradient); cheaper than
/// [`crf_loss_grad`] for objective reporting.
pub fn crf_loss(
    layout: &Layout,
    weights: &[f64],
    scale: f64,
    feats: &[SparseVec],
    gold: &[u32],
) -> Result<f64> {
    let mut lat = score_lattice(layout, weights, scale, feats)?;
    forward_backward(&mut lat)?;
    Ok(lat.log_z - lat.path_score(gold))
}

pub fn crf_loss_grad(
    layout: &Layout,
    weights: &[f64],
    scale: f64,
    feats: &[SparseVec],
    gold: &[u32],
) -> Result<(f64, Vec<(usize, f64)>)> {
    let yn = layout.num_labels;
    let n = feats.len();
    let mut lat = score_lattice(layout, weights, scale, feats)?;
    forward_backward(&mut lat)?;
    let loss = lat.log_z - lat.path_score(gold);

    // Accumulate raw (index, value) contributions, then sort and merge
    // duplicates. Short mini-samples hit this path many times per epoch, so
    // avoiding a hash map per call matters for throughput.
    let nnz: usize = feats.iter().map(|fv| fv.len()).sum();
    let mut raw: Vec<(usize, f64)> = Vec::with_capacity(nnz * yn + n.saturating_sub(1) * yn * yn);
    for (k, fv) in feats.iter().enumerate() {
        let g = gold[k] as usize;
        for y in 0..yn {
            let p = lat.node_marginal(k, y);
            let diff = p - (y == g) as u8 as f64;
            if diff == 0.0 {
                continue;
            }
            for &(f, v) in fv {
                raw.push((layout.node(f as usize, y), diff * v));
            }
        }
    }
    for k in 1..n {
        let (gp, g) = (gold[k - 1] as usize, gold[k] as usize);
        for prev in 0..yn {
            for y in 0..yn {
                let p = lat.pair_marginal(k, prev, y);
                let diff = p - (prev == gp && y == g) as u8 as f64;
                if diff == 0.0 {
                    continue;
                }
                raw.push((layout.trans(prev, y), diff));
                if layout.rich_edges {
                    for &(f, v) in &feats[k] {
                        raw.push((layout.edge(f as usize, prev, y), diff * v));
                    }
                }
            }
        }
    }
    raw.sort_unstable_by_key(|&(idx, _)| idx);
    let mut grad: Vec<(usize, f64)> = Vec::with_capacity(raw.len());
    for (idx, v) in raw {
        match grad.last_mut() {
            Some(last) if last.0 == idx => last.1 += v,
            _ => grad.push((idx, v)),
        }
    }
    Ok((loss, grad))
}

/// Argmax label path. Ties break toward the lowest label id at every
/// backpointer decision.
pub fn viterbi(
    layout: &Layout,
    weights: &[f64],
    scale: f64,
    feats: &[SparseVec],
) -> Result<(Vec<u32>, f64)> {
    let lat = score_lattice(layout, weights, scale, feats)?;
    let n = lat.n;
    let yn = lat.num_labels;
    let mut delta = vec![0.0f64; n * yn];
    let mut back = vec![0u32; n * yn];
    delta[..yn].copy_from_slice(&lat.node[..yn]);
    for k in 1..n {
        for y in 0..yn {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0u32;
            for prev in 0..yn {
                let s = delta[(k - 1) * yn + prev] + lat.edge_at(k, prev, y);
                if s > best {
                    best = s;
                    arg = prev as u32;
                }
            }
            delta[k * yn + y] = best + lat.node_at(k, y);
            back[k * yn + y] = arg;
        }
    }
    let mut best = f64::NEG_INFINITY;
    let mut y = 0usize;
    for cand in 0..yn {
        if delta[(n - 1) * yn + cand] > best {
            best = delta[(n - 1) * yn + cand];
            y = cand;
        }
    }
    let mut path = vec![0u32; n];
    path[n - 1] = y as u32;
    for k in (1..n).rev() {
        path[k - 1] = back[k * yn + path[k] as usize];
    }
    Ok((path, best))
}

/// Accumulate `sign *` the feature vector of one label path into `out`.
fn accumulate_path(
    layout: &Layout,
    feats: &[SparseVec],
    labels: &[u32],
    sign: f64,
    out: &mut HashMap<usize, f64>,
) {
    for (k, fv) in feats.iter().enumerate() {
        let y = labels[k] as usize;
        for &(f, v) in fv {
            *out.entry(layout.node(f as usize, y)).or_insert(0.0) += sign * v;
        }
        if k >= 1 {
            let prev = labels[k - 1] as usize;
            *out.entry(layout.trans(prev, y)).or_insert(0.0) += sign;
            if layout.rich_edges {
                for &(f, v) in fv {
                    *out.entry(layout.edge(f as usize, prev, y)).or_insert(0.0) += sign * v;
                }
            }
        }
    }
}

/// Perceptron weights with the lag-sum averaging trick: `average()`
/// equals the uniform mean of the weight vector over all recorded
/// steps.
#[derive(Debug, Clone)]
pub struct AveragedWeights {
    pub weights: Vec<f64>,
    lag: Vec<f64>,
    steps: u64,
}

impl AveragedWeights {
    pub fn new(total: usize) -> Self {
        AveragedWeights {
            weights: vec![0.0; total],
            lag: vec![0.0; total],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Start step `t`; deltas applied afterwards count from this step on.
    pub fn begin_step(&mut self) {
        self.steps += 1;
    }

    pub fn apply(&mut self, index: usize, delta: f64) {
        self.weights[index] += delta;
        self.lag[index] += (self.steps as f64 - 1.0) * delta;
    }

    /// Uniform average of the weight vector over steps `1..=steps`.
    pub fn average(&self) -> Vec<f64> {
        assert!(self.steps > 0, "no update steps recorded");
        let t = self.steps as f64;
        self.weights
            .iter()
            .zip(&self.lag)
            .map(|(&w, &u)| w - u / t)
            .collect()
    }
}

/// One structured perceptron step: decode, and on a mistake move the
/// weights by `lr * (phi(gold) - phi(predicted))`. Returns the Hamming
/// mistake count.
pub fn perceptron_update(
    avg: &mut AveragedWeights,
    layout: &Layout,
    feats: &[SparseVec],
    gold: &[u32],
    lr: f64,
) -> Result<usize> {
    avg.begin_step();
    let (pred, _) = viterbi(layout, &avg.weights, 1.0, feats)?;
    if pred == gold {
        return Ok(0);
    }
    let mistakes = pred.iter().zip(gold).filter(|(a, b)| a != b).count();
    let mut delta: HashMap<usize, f64> = HashMap::new();
    accumulate_path(layout, feats, gold, 1.0, &mut delta);
    accumulate_path(layout, feats, &pred, -1.0, &mut delta);
    for (idx, d) in delta {
        if d != 0.0 {
            avg.apply(idx, lr * d);
        }
    }
    Ok(mistakes)
}

const MODEL_MAGIC: &[u8; 4] = b"SRGM";
const MODEL_VERSION: u32 = 1;

fn write_alphabet<W: Write>(w: &mut W, a: &Alphabet) -> Result<()> {
    w.write_all(&(a.len() as u32).to_le_bytes())?;
    for s in a.iter() {
        w.write_all(&(s.len() as u32).to_le_bytes())?;
        w.write_all(s.as_bytes())?;
    }
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_alphabet<R: Read>(r: &mut R) -> Result<Alphabet> {
    let n = u32::from_le_bytes(read_exact(r)?) as usize;
    let mut a = Alphabet::new();
    for _ in 0..n {
        let len = u32::from_le_bytes(read_exact(r)?) as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        let s = String::from_utf8(buf).map_err(|_| Error::data("invalid UTF-8 in model file"))?;
        a.intern(&s);
    }
    a.freeze();
    Ok(a)
}

impl Model {
    /// Bit-exact binary serialization: magic, version, dims, alphabets,
    /// then weights as little-endian doubles.
    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        w.write_all(&(self.layout.num_features as u64).to_le_bytes())?;
        w.write_all(&(self.layout.num_labels as u64).to_le_bytes())?;
        w.write_all(&[self.layout.rich_edges as u8])?;
        write_alphabet(w, &self.label_alphabet)?;
        write_alphabet(w, &self.feature_alphabet)?;
        for &x in &self.weights {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Model> {
        let magic: [u8; 4] = read_exact(r)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::data("not a model file (bad magic)"));
        }
        let version = u32::from_le_bytes(read_exact(r)?);
        if version != MODEL_VERSION {
            return Err(Error::data(format!("unsupported model version {}", version)));
        }
        let d = u64::from_le_bytes(read_exact(r)?) as usize;
        let yn = u64::from_le_bytes(read_exact(r)?) as usize;
        let rich = read_exact::<R, 1>(r)?[0] != 0;
        let layout = Layout::new(d, yn, rich)?;
        let label_alphabet = read_alphabet(r)?;
        let feature_alphabet = read_alphabet(r)?;
        let mut weights = Vec::with_capacity(layout.total());
        for _ in 0..layout.total() {
            weights.push(f64::from_le_bytes(read_exact(r)?));
        }
        if !weights.iter().all(|x| x.is_finite()) {
            return Err(Error::data("non-finite weight in model file"));
        }
        Ok(Model {
            weights,
            layout,
            label_alphabet,
            feature_alphabet,
        })
    }
}

pub mod oracle {
    //! Brute-force enumeration over all `|Y|^n` label sequences,
    //! independent of the dynamic-programming path. Exponential in `n`;
    //! reference implementations for tests, not for real decoding.

    use super::Lattice;

    pub fn all_paths(n: usize, yn: usize) -> Vec<Vec<u32>> {
        let mut paths = vec![Vec::new()];
        for _ in 0..n {
            let mut next = Vec::with_capacity(paths.len() * yn);
            for p in &paths {
                for y in 0..yn {
                    let mut q = p.clone();
                    q.push(y as u32);
                    next.push(q);
                }
            }
            paths = next;
        }
        paths
    }

    pub fn log_z(lat: &Lattice) -> f64 {
        let scores: Vec<f64> = all_paths(lat.n, lat.num_labels)
            .iter()
            .map(|p| lat.path_score(p))
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
    }

    pub fn node_marginal(lat: &Lattice, k: usize, y: usize) -> f64 {
        let lz = log_z(lat);
        all_paths(lat.n, lat.num_labels)
            .iter()
            .filter(|p| p[k] == y as u32)
            .map(|p| (lat.path_score(p) - lz).exp())
            .sum()
    }

    pub fn pair_marginal(lat: &Lattice, k: usize, prev: usize, y: usize) -> f64 {
        let lz = log_z(lat);
        all_paths(lat.n, lat.num_labels)
            .iter()
            .filter(|p| p[k - 1] == prev as u32 && p[k] == y as u32)
            .map(|p| (lat.path_score(p) - lz).exp())
            .sum()
    }

    /// Argmax path with the same tie-break as `viterbi`: among equal
    /// scores the lexicographically smallest path wins, which the
    /// enumeration order guarantees with a strict `>` comparison.
    pub fn argmax(lat: &Lattice) -> (Vec<u32>, f64) {
        let mut best_path = Vec::new();
        let mut best = f64::NEG_INFINITY;
        for p in all_paths(lat.n, lat.num_labels) {
            let s = lat.path_score(&p);
            if s > best {
                best = s;
                best_path = p;
            }
        }
        (best_path, best)
    }
}
