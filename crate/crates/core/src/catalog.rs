//! Object storage and nearest-unused lookups.
//!
//! [`KdTree`] answers "closest object to `z` that is not yet used" by a single
//! branch-and-bound traversal that skips excluded ids, which is equivalent to
//! asking for successive nearest neighbours until an unused one appears. The
//! tree is never modified after construction. Ties on distance always go to
//! the smallest object id.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::io::Read;
use std::path::Path;

use crate::geometry::dist2;
use crate::numeric::MIN_VARIANCE;
use crate::{Error, Result};

/// `n` objects with `dim`-dimensional feature vectors, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSet {
    dim: usize,
    data: Vec<f64>,
    labels: Option<Vec<String>>,
    image_refs: Option<Vec<String>>,
}

impl ObjectSet {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("object dimension must be at least 1".into()));
        }
        if data.len() % dim != 0 {
            return Err(Error::InvalidArgument(format!(
                "data length {} is not a multiple of dimension {dim}",
                data.len()
            )));
        }
        if data.len() / dim < 2 {
            return Err(Error::InvalidArgument("an object set needs at least two objects".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("object features"));
        }
        Ok(ObjectSet { dim, data, labels: None, image_refs: None })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidArgument("rows have inconsistent lengths".into()));
        }
        Self::new(dim, rows.concat())
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::InvalidArgument("label count differs from object count".into()));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_image_refs(mut self, refs: Vec<String>) -> Result<Self> {
        if refs.len() != self.len() {
            return Err(Error::InvalidArgument("image_ref count differs from object count".into()));
        }
        self.image_refs = Some(refs);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, id: usize) -> &[f64] {
        &self.data[id * self.dim..(id + 1) * self.dim]
    }

    pub fn get(&self, id: usize) -> Result<&[f64]> {
        if id >= self.len() {
            return Err(Error::UnknownObject { id, n: self.len() });
        }
        Ok(self.row(id))
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        self.labels.as_ref().map(|l| l[id].as_str())
    }

    pub fn image_ref(&self, id: usize) -> Option<&str> {
        self.image_refs.as_ref().map(|r| r[id].as_str())
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn image_refs(&self) -> Option<&[String]> {
        self.image_refs.as_deref()
    }

    /// Replaces the feature vectors, keeping labels and image references.
    pub fn with_vectors(&self, dim: usize, data: Vec<f64>) -> Result<Self> {
        let mut out = ObjectSet::new(dim, data)?;
        if out.len() != self.len() {
            return Err(Error::InvalidArgument("replacement vectors change the object count".into()));
        }
        out.labels = self.labels.clone();
        out.image_refs = self.image_refs.clone();
        Ok(out)
    }

    /// Standardises every column to zero mean and unit variance. Constant
    /// columns are only centred.
    pub fn standardized(&self) -> ObjectSet {
        let n = self.len() as f64;
        let mut data = self.data.clone();
        for c in 0..self.dim {
            let mean = self.rows().map(|r| r[c]).sum::<f64>() / n;
            let var = self.rows().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / n;
            let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
            for r in 0..self.len() {
                data[r * self.dim + c] = (data[r * self.dim + c] - mean) / scale;
            }
        }
        ObjectSet { dim: self.dim, data, labels: self.labels.clone(), image_refs: self.image_refs.clone() }
    }

    /// Reads `id,label,[image_ref,]f1,…,fd` with a header row. Ids must be
    /// exactly `0..n-1` in any order.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() < 3 || &headers[0] != "id" || &headers[1] != "label" {
            return Err(Error::Parse { line: 1, detail: "expected header `id,label,f1,…`".into() });
        }
        let has_image = &headers[2] == "image_ref";
        let first_feature = if has_image { 3 } else { 2 };
        let dim = headers.len() - first_feature;
        if dim == 0 {
            return Err(Error::Parse { line: 1, detail: "no feature columns".into() });
        }
        let mut rows: Vec<Option<(String, Option<String>, Vec<f64>)>> = Vec::new();
        for (idx, record) in rdr.records().enumerate() {
            let line = idx + 2;
            let record = record?;
            let id: usize = record[0]
                .parse()
                .map_err(|_| Error::Parse { line, detail: format!("bad id `{}`", &record[0]) })?;
            let feats = (first_feature..record.len())
                .map(|c| {
                    record[c]
                        .parse::<f64>()
                        .map_err(|_| Error::Parse { line, detail: format!("bad feature `{}`", &record[c]) })
                })
                .collect::<Result<Vec<f64>>>()?;
            if feats.len() != dim {
                return Err(Error::Parse { line, detail: "wrong number of features".into() });
            }
            if id >= rows.len() {
                rows.resize(id + 1, None);
            }
            if rows[id].is_some() {
                return Err(Error::Parse { line, detail: format!("duplicate id {id}") });
            }
            let image = has_image.then(|| record[2].to_string());
            rows[id] = Some((record[1].to_string(), image, feats));
        }
        let mut labels = Vec::with_capacity(rows.len());
        let mut images = Vec::with_capacity(rows.len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (id, row) in rows.into_iter().enumerate() {
            let (label, image, feats) =
                row.ok_or_else(|| Error::Parse { line: 0, detail: format!("missing id {id}") })?;
            labels.push(label);
            images.push(image.unwrap_or_default());
            data.extend(feats);
        }
        let set = ObjectSet::new(dim, data)?.with_labels(labels)?;
        if has_image {
            set.with_image_refs(images)
        } else {
            Ok(set)
        }
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    /// Writes the same format [`ObjectSet::read_csv`] accepts.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["id".to_string(), "label".to_string()];
        if self.image_refs.is_some() {
            header.push("image_ref".into());
        }
        header.extend((1..=self.dim).map(|c| format!("f{c}")));
        wtr.write_record(&header)?;
        for id in 0..self.len() {
            let mut rec = vec![id.to_string(), self.label(id).unwrap_or("").to_string()];
            if let Some(img) = self.image_ref(id) {
                rec.push(img.to_string());
            }
            rec.extend(self.row(id).iter().map(|v| format!("{v:?}")));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// The set of object ids already shown in the current search.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExclusionSet {
    ids: HashSet<usize>,
}

impl ExclusionSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: usize) -> bool {
        self.ids.insert(id)
    }

    #[inline]
    pub fn contains(&self, id: usize) -> bool {
        self.ids.contains(&id)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.ids.iter().copied()
    }
}

impl FromIterator<usize> for ExclusionSet {
    fn from_iter<T: IntoIterator<Item = usize>>(iter: T) -> Self {
        ExclusionSet { ids: iter.into_iter().collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist2: f64,
    id: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2.total_cmp(&other.dist2).then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone)]
enum NodeKind {
    Leaf { start: usize, end: usize },
    Split { left: usize, right: usize },
}

#[derive(Debug, Clone)]
struct Node {
    kind: NodeKind,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

const BUCKET_SIZE: usize = 8;

/// Static k-d tree over an object set.
#[derive(Debug, Clone)]
pub struct KdTree {
    dim: usize,
    n: usize,
    /// Points in tree order.
    points: Vec<f64>,
    ids: Vec<usize>,
    nodes: Vec<Node>,
}

/// Per-query statistics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QueryStats {
    pub nodes_visited: usize,
    pub points_checked: usize,
}

impl KdTree {
    /// Builds the tree; splits on the widest coordinate at the median.
    pub fn build(objects: &ObjectSet) -> KdTree {
        let dim = objects.dim();
        let n = objects.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut nodes = Vec::with_capacity(2 * n / BUCKET_SIZE + 1);
        build_node(objects, &mut order, 0, &mut nodes);
        let mut points = Vec::with_capacity(n * dim);
        for &id in &order {
            points.extend_from_slice(objects.row(id));
        }
        KdTree { dim, n, points, ids: order, nodes }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Coordinates of object `id`.
    pub fn point(&self, id: usize) -> Option<&[f64]> {
        self.ids.iter().position(|&x| x == id).map(|slot| &self.points[slot * self.dim..(slot + 1) * self.dim])
    }

    fn check_query(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: z.len() });
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("query point"));
        }
        Ok(())
    }

    /// Closest id to `z` not in `excluded` (smallest id on ties).
    pub fn nearest_unused(&self, z: &[f64], excluded: &ExclusionSet) -> Result<usize> {
        self.nearest_unused_with_stats(z, excluded).map(|(id, _)| id)
    }

    pub fn nearest_unused_with_stats(&self, z: &[f64], excluded: &ExclusionSet) -> Result<(usize, QueryStats)> {
        self.check_query(z)?;
        let mut best = Candidate { dist2: f64::INFINITY, id: usize::MAX };
        let mut stats = QueryStats::default();
        self.search_nearest(0, z, excluded, &mut best, &mut stats);
        if best.id == usize::MAX {
            return Err(Error::AllExcluded);
        }
        Ok((best.id, stats))
    }

    fn search_nearest(
        &self,
        node: usize,
        z: &[f64],
        excluded: &ExclusionSet,
        best: &mut Candidate,
        stats: &mut QueryStats,
    ) {
        stats.nodes_visited += 1;
        match self.nodes[node].kind {
            NodeKind::Leaf { start, end } => {
                for slot in start..end {
                    let id = self.ids[slot];
                    stats.points_checked += 1;
                    let d = dist2(&self.points[slot * self.dim..(slot + 1) * self.dim], z);
                    let cand = Candidate { dist2: d, id };
                    if cand < *best && !excluded.contains(id) {
                        *best = cand;
                    }
                }
            }
            NodeKind::Split { left, right, .. } => {
                let dl = box_dist2(&self.nodes[left], z);
                let dr = box_dist2(&self.nodes[right], z);
                let (first, df, second, ds) = if dl <= dr { (left, dl, right, dr) } else { (right, dr, left, dl) };
                if df <= best.dist2 {
                    self.search_nearest(first, z, excluded, best, stats);
                }
                if ds <= best.dist2 {
                    self.search_nearest(second, z, excluded, best, stats);
                }
            }
        }
    }

    /// Up to `k` closest non-excluded ids, sorted by (distance, id).
    pub fn knn_unused(&self, z: &[f64], k: usize, excluded: &ExclusionSet) -> Result<Vec<(usize, f64)>> {
        self.check_query(z)?;
        if k == 0 {
            return Ok(Vec::new());
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search_knn(0, z, k, excluded, &mut heap);
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        Ok(out.into_iter().map(|c| (c.id, c.dist2)).collect())
    }

    fn search_knn(&self, node: usize, z: &[f64], k: usize, excluded: &ExclusionSet, heap: &mut BinaryHeap<Candidate>) {
        let bound = |heap: &BinaryHeap<Candidate>| {
            if heap.len() < k {
                f64::INFINITY
            } else {
                heap.peek().map_or(f64::INFINITY, |c| c.dist2)
            }
        };
        match self.nodes[node].kind {
            NodeKind::Leaf { start, end } => {
                for slot in start..end {
                    let id = self.ids[slot];
                    if excluded.contains(id) {
                        continue;
                    }
                    let cand = Candidate { dist2: dist2(&self.points[slot * self.dim..(slot + 1) * self.dim], z), id };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            NodeKind::Split { left, right, .. } => {
                let dl = box_dist2(&self.nodes[left], z);
                let dr = box_dist2(&self.nodes[right], z);
                let (first, df, second, ds) = if dl <= dr { (left, dl, right, dr) } else { (right, dr, left, dl) };
                if df <= bound(heap) {
                    self.search_knn(first, z, k, excluded, heap);
                }
                if ds <= bound(heap) {
                    self.search_knn(second, z, k, excluded, heap);
                }
            }
        }
    }
}

fn box_dist2(node: &Node, z: &[f64]) -> f64 {
    let mut acc = 0.0;
    for ((&lo, &hi), &v) in node.lo.iter().zip(&node.hi).zip(z) {
        let d = if v < lo {
            lo - v
        } else if v > hi {
            v - hi
        } else {
            0.0
        };
        acc += d * d;
    }
    acc
}

fn build_node(objects: &ObjectSet, order: &mut [usize], offset: usize, nodes: &mut Vec<Node>) -> usize {
    let dim = objects.dim();
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for &id in order.iter() {
        for (c, &v) in objects.row(id).iter().enumerate() {
            lo[c] = lo[c].min(v);
            hi[c] = hi[c].max(v);
        }
    }
    let me = nodes.len();
    if order.len() <= BUCKET_SIZE {
        nodes.push(Node { kind: NodeKind::Leaf { start: offset, end: offset + order.len() }, lo, hi });
        return me;
    }
    let split_dim = (0..dim)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])).then(b.cmp(&a)))
        .expect("dim >= 1");
    if hi[split_dim] - lo[split_dim] <= 0.0 {
        // all points identical
        nodes.push(Node { kind: NodeKind::Leaf { start: offset, end: offset + order.len() }, lo, hi });
        return me;
    }
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        objects.row(a)[split_dim].total_cmp(&objects.row(b)[split_dim]).then(a.cmp(&b))
    });
    nodes.push(Node { kind: NodeKind::Leaf { start: 0, end: 0 }, lo, hi });
    let (left_ids, right_ids) = order.split_at_mut(mid);
    let left = build_node(objects, left_ids, offset, nodes);
    let right = build_node(objects, right_ids, offset + mid, nodes);
    nodes[me].kind = NodeKind::Split { left, right };
    me
}

/// Tuning for [`nearest_unused_mahalanobis`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MahalanobisConfig {
    /// Catalogs up to this size are scanned exhaustively.
    pub exhaustive_threshold: usize,
    /// Minimum Euclidean shortlist size above the threshold.
    pub min_shortlist: usize,
}

impl Default for MahalanobisConfig {
    fn default() -> Self {
        MahalanobisConfig { exhaustive_threshold: 2048, min_shortlist: 64 }
    }
}

/// `(ν - z)ᵀ Ψ⁻¹ (ν - z)` for a diagonal `Ψ`.
#[inline]
pub fn mahalanobis2(mean: &[f64], variances: &[f64], z: &[f64]) -> f64 {
    let mut acc = 0.0;
    for ((m, v), x) in mean.iter().zip(variances).zip(z) {
        let d = m - x;
        acc += d * d / v;
    }
    acc
}

/// Closest non-excluded object to `z` under each object's own diagonal
/// covariance. `variances` is row-major `n × dim`, aligned with the objects
/// the tree was built from.
///
/// Exhaustive up to `cfg.exhaustive_threshold` objects; above it, the
/// `max(min_shortlist, 2|excluded| + 2)` Euclidean neighbours are re-ranked.
pub fn nearest_unused_mahalanobis(
    index: &KdTree,
    objects: &ObjectSet,
    z: &[f64],
    excluded: &ExclusionSet,
    variances: &[f64],
    cfg: &MahalanobisConfig,
) -> Result<usize> {
    index.check_query(z)?;
    let dim = index.dim();
    if variances.len() != objects.len() * dim {
        return Err(Error::DimensionMismatch { expected: objects.len() * dim, got: variances.len() });
    }
    let candidates: Vec<usize> = if objects.len() <= cfg.exhaustive_threshold {
        (0..objects.len()).filter(|&id| !excluded.contains(id)).collect()
    } else {
        let k = cfg.min_shortlist.max(2 * excluded.len() + 2);
        index.knn_unused(z, k, excluded)?.into_iter().map(|(id, _)| id).collect()
    };
    let mut best = Candidate { dist2: f64::INFINITY, id: usize::MAX };
    for id in candidates {
        let var = &variances[id * dim..(id + 1) * dim];
        if var.iter().any(|&v| !(v >= MIN_VARIANCE)) {
            return Err(Error::InvalidArgument(format!("object {id} has a variance below {MIN_VARIANCE}")));
        }
        let cand = Candidate { dist2: mahalanobis2(objects.row(id), var, z), id };
        if cand < best {
            best = cand;
        }
    }
    if best.id == usize::MAX {
        return Err(Error::AllExcluded);
    }
    Ok(best.id)
}
