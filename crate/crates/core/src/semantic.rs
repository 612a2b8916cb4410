//! Rouge-1 similarity and greedy semantic clustering of sampled responses.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Response;
use crate::{Error, Result};

/// Default similarity above which two responses are treated as the same
/// semantic answer.
pub const DEFAULT_CLUSTER_THRESHOLD: f64 = 0.7;

/// Multiset of lowercase unigrams.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenBag {
    counts: BTreeMap<String, u32>,
    len: u32,
}

impl TokenBag {
    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn count(&self, token: &str) -> usize {
        self.counts.get(token).copied().unwrap_or(0) as usize
    }

    /// Size of the multiset intersection.
    pub fn overlap(&self, other: &TokenBag) -> usize {
        let (small, large) = if self.counts.len() <= other.counts.len() {
            (self, other)
        } else {
            (other, self)
        };
        small
            .counts
            .iter()
            .map(|(t, &c)| c.min(large.counts.get(t).copied().unwrap_or(0)) as usize)
            .sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.counts.iter().map(|(t, &c)| (t.as_str(), c as usize))
    }
}

/// Lowercases, treats every non-alphanumeric character as a word boundary,
/// and splits on whitespace.
pub fn tokenize(text: &str) -> TokenBag {
    let mut bag = TokenBag::default();
    let lowered = text.to_lowercase();
    for token in lowered
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
    {
        *bag.counts.entry(token.to_owned()).or_insert(0) += 1;
        bag.len += 1;
    }
    bag
}

/// Rouge-1 F-measure between two token bags.
pub fn rouge1_bags(a: &TokenBag, b: &TokenBag) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let overlap = a.overlap(b) as f64;
    if overlap == 0.0 {
        return 0.0;
    }
    let precision = overlap / a.len() as f64;
    let recall = overlap / b.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Rouge-1 F-measure between two strings.
pub fn rouge1_f(a: &str, b: &str) -> f64 {
    rouge1_bags(&tokenize(a), &tokenize(b))
}

/// Dense symmetric similarity matrix with unit diagonal, indexed by
/// [`Response::precomputed_id`].
#[derive(Clone, PartialEq)]
pub struct SimilarityMatrix {
    dim: usize,
    values: Vec<f64>,
}

impl fmt::Debug for SimilarityMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SimilarityMatrix")
            .field("dim", &self.dim)
            .finish()
    }
}

const SYMMETRY_TOL: f64 = 1e-9;

impl SimilarityMatrix {
    /// Builds a matrix from row-major values, checking shape, symmetry and
    /// the unit diagonal.
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || values.len() != dim * dim {
            return Err(Error::InvalidArgument(format!(
                "similarity matrix needs {dim}x{dim} values, got {}",
                values.len()
            )));
        }
        for i in 0..dim {
            let d = values[i * dim + i];
            if (d - 1.0).abs() > SYMMETRY_TOL {
                return Err(Error::InvalidArgument(format!(
                    "similarity matrix diagonal entry {i} is {d}, expected 1"
                )));
            }
            for j in 0..i {
                let (a, b) = (values[i * dim + j], values[j * dim + i]);
                if !a.is_finite() || (a - b).abs() > SYMMETRY_TOL {
                    return Err(Error::InvalidArgument(format!(
                        "similarity matrix not symmetric at ({i}, {j}): {a} vs {b}"
                    )));
                }
            }
        }
        Ok(Self { dim, values })
    }

    /// Symmetric matrix with i.i.d. uniform off-diagonal entries in `[0, 1)`.
    /// Useful as an uninformative similarity that ignores response content.
    pub fn random(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; dim * dim];
        for i in 0..dim {
            values[i * dim + i] = 1.0;
            for j in 0..i {
                let v: f64 = rng.random();
                values[i * dim + j] = v;
                values[j * dim + i] = v;
            }
        }
        Self { dim, values }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> Result<f64> {
        for id in [i, j] {
            if id >= self.dim {
                return Err(Error::PrecomputedIdOutOfRange { id, dim: self.dim });
            }
        }
        Ok(self.values[i * self.dim + j])
    }

    /// Text format: a first line holding the dimension `n`, then `n` lines of
    /// `n` whitespace-separated values.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", self.dim)?;
        for row in self.values.chunks(self.dim) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }

    pub fn read_text<R: Read>(r: R) -> Result<Self> {
        let mut lines = BufReader::new(r)
            .lines()
            .filter(|l| !l.as_ref().is_ok_and(|l| l.starts_with('#')));
        let dim = parse_header(lines.next().transpose()?)?;
        let mut values = Vec::with_capacity(dim * dim);
        for line in lines {
            let line = line?;
            for tok in line.split_whitespace() {
                values.push(tok.parse::<f64>().map_err(|e| {
                    Error::InvalidArgument(format!("bad matrix entry {tok:?}: {e}"))
                })?);
            }
        }
        Self::new(dim, values)
    }

    /// Binary format: the same dimension header line, followed by `n * n`
    /// little-endian `f64` values in row-major order.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", self.dim)?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(r: R) -> Result<Self> {
        let mut reader = BufReader::new(r);
        let mut header = String::new();
        loop {
            header.clear();
            if reader.read_line(&mut header)? == 0 || !header.starts_with('#') {
                break;
            }
        }
        let dim = parse_header(Some(header))?;
        let mut buf = Vec::new();
        reader.read_to_end(&mut buf)?;
        if buf.len() != dim * dim * 8 {
            return Err(Error::InvalidArgument(format!(
                "binary matrix body has {} bytes, expected {}",
                buf.len(),
                dim * dim * 8
            )));
        }
        let values = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Self::new(dim, values)
    }

    /// Loads a matrix, choosing the binary reader for `.bin` files and the
    /// text reader otherwise.
    /// Writes text, or binary for a `.bin` path, after an optional `#`
    /// comment line. Both readers skip leading comment lines.
    pub fn save(&self, path: &Path, comment: Option<&str>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        if let Some(c) = comment {
            writeln!(w, "# {}", c.replace('\n', " "))?;
        }
        if path.extension().is_some_and(|e| e == "bin") {
            self.write_binary(&mut w)?;
        } else {
            self.write_text(&mut w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path)?;
        if path.extension().is_some_and(|e| e == "bin") {
            Self::read_binary(file)
        } else {
            Self::read_text(file)
        }
    }
}

fn parse_header(line: Option<String>) -> Result<usize> {
    let line = line.ok_or_else(|| Error::InvalidArgument("empty matrix file".into()))?;
    line.trim()
        .parse()
        .map_err(|e| Error::InvalidArgument(format!("bad matrix dimension header {line:?}: {e}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Rouge1,
    Precomputed,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Rouge1 => "rouge1",
            BackendKind::Precomputed => "precomputed",
        })
    }
}

/// Serializable description of a backend, used for provenance checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackendSpec {
    pub kind: BackendKind,
    pub threshold: f64,
}

/// How response similarity is measured, and the clustering cut-off.
#[derive(Debug, Clone)]
pub struct SimilarityBackend {
    threshold: f64,
    matrix: Option<Arc<SimilarityMatrix>>,
}

impl SimilarityBackend {
    pub fn rouge1() -> Self {
        Self {
            threshold: DEFAULT_CLUSTER_THRESHOLD,
            matrix: None,
        }
    }

    pub fn precomputed(matrix: Arc<SimilarityMatrix>) -> Self {
        Self {
            threshold: DEFAULT_CLUSTER_THRESHOLD,
            matrix: Some(matrix),
        }
    }

    pub fn with_threshold(mut self, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "clustering threshold must lie in (0, 1), got {threshold}"
            )));
        }
        self.threshold = threshold;
        Ok(self)
    }

    pub fn kind(&self) -> BackendKind {
        if self.matrix.is_some() {
            BackendKind::Precomputed
        } else {
            BackendKind::Rouge1
        }
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn matrix(&self) -> Option<&SimilarityMatrix> {
        self.matrix.as_deref()
    }

    pub fn spec(&self) -> BackendSpec {
        BackendSpec {
            kind: self.kind(),
            threshold: self.threshold,
        }
    }
}

impl Default for SimilarityBackend {
    fn default() -> Self {
        Self::rouge1()
    }
}

fn precomputed_id(r: &Response) -> Result<usize> {
    r.precomputed_id.ok_or(Error::MissingPrecomputedId)
}

/// Similarity of two responses under the given backend.
pub fn similarity(a: &Response, b: &Response, backend: &SimilarityBackend) -> Result<f64> {
    match backend.matrix() {
        None => Ok(rouge1_f(&a.text, &b.text)),
        Some(m) => m.get(precomputed_id(a)?, precomputed_id(b)?),
    }
}

/// A group of responses judged semantically equivalent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticCluster {
    /// First member in arrival order.
    pub representative: Response,
    pub members: Vec<Response>,
    pub count: usize,
    /// `count / M`, where `M` is the number of responses clustered together.
    pub confidence: f64,
}

/// Per-response features prepared once so that the greedy pass does not
/// re-tokenize.
enum Features<'a> {
    Bags(Vec<TokenBag>),
    Ids(&'a SimilarityMatrix, Vec<usize>),
}

impl Features<'_> {
    fn sim(&self, i: usize, j: usize) -> f64 {
        match self {
            Features::Bags(b) => rouge1_bags(&b[i], &b[j]),
            Features::Ids(m, ids) => m.values[ids[i] * m.dim + ids[j]],
        }
    }
}

/// Greedy single-pass clustering in arrival order: each response joins the
/// first cluster whose representative it is strictly more similar to than
/// the backend threshold, otherwise it founds a new cluster.
///
/// Returns member indices per cluster, sorted by descending size; equal
/// sizes keep the order in which their representatives arrived. Within a
/// cluster indices are ascending, so the first is the representative.
pub fn cluster_indices(
    responses: &[Response],
    backend: &SimilarityBackend,
) -> Result<Vec<Vec<usize>>> {
    if responses.is_empty() {
        return Ok(Vec::new());
    }
    let features = match backend.matrix() {
        None => Features::Bags(responses.iter().map(|r| tokenize(&r.text)).collect()),
        Some(m) => {
            let ids = responses
                .iter()
                .map(|r| {
                    let id = precomputed_id(r)?;
                    if id >= m.dim {
                        return Err(Error::PrecomputedIdOutOfRange { id, dim: m.dim });
                    }
                    Ok(id)
                })
                .collect::<Result<Vec<_>>>()?;
            Features::Ids(m, ids)
        }
    };

    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in 0..responses.len() {
        match groups
            .iter_mut()
            .find(|g| features.sim(g[0], i) > backend.threshold)
        {
            Some(g) => g.push(i),
            None => groups.push(vec![i]),
        }
    }
    // stable: ties keep representative arrival order
    groups.sort_by_key(|g| std::cmp::Reverse(g.len()));
    Ok(groups)
}

/// Clusters responses with [`cluster_indices`] and attaches `N_i / M`
/// confidences, `M` being `responses.len()`. The result depends on the
/// input order.
pub fn cluster_responses(
    responses: &[Response],
    backend: &SimilarityBackend,
) -> Result<Vec<SemanticCluster>> {
    let total = responses.len() as f64;
    Ok(cluster_indices(responses, backend)?
        .into_iter()
        .map(|g| {
            let members: Vec<Response> = g.iter().map(|&i| responses[i].clone()).collect();
            SemanticCluster {
                representative: members[0].clone(),
                count: members.len(),
                confidence: members.len() as f64 / total,
                members,
            }
        })
        .collect())
}
