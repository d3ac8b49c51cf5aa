//! Point clouds and exact Euclidean K-nearest-neighbour search.
//!
//! [`SpatialIndex`] is a bucketed KD-tree. Results are exact and ordered by
//! `(distance, point index)`, so equal-distance neighbours always come back in
//! ascending index order. The tree is immutable after [`build_index`] and can
//! be shared across threads.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::{Read, Write};

use thiserror::Error;

use crate::scalar::{dist2, Scalar};

const LEAF_SIZE: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("points {first} and {second} are identical")]
    DuplicatePoints { first: usize, second: usize },
    #[error("point {index} has {got} coordinates, expected {expected}")]
    DimMismatch { index: usize, expected: usize, got: usize },
    #[error("point {index} has a non-finite coordinate or value")]
    NonFinite { index: usize },
    #[error("{points} points but {values} values")]
    LengthMismatch { points: usize, values: usize },
    #[error("dimension must be at least 1")]
    ZeroDim,
    #[error("requested K={k} neighbours but the cloud has {size} points")]
    KTooLarge { k: usize, size: usize },
    #[error("K must be at least 1")]
    KZero,
    #[error("query index {index} out of range for {size} points")]
    QueryOutOfRange { index: usize, size: usize },
    #[error("csv: {0}")]
    Csv(String),
}

/// Irregular sample locations with one scalar sample per point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud<T> {
    dim: usize,
    coords: Vec<T>,
    values: Vec<T>,
}

impl<T: Scalar> PointCloud<T> {
    /// Validates and builds a cloud from per-point coordinate rows.
    pub fn new(points: Vec<Vec<T>>, values: Vec<T>) -> Result<Self, GeometryError> {
        let dim = points.first().map(Vec::len).ok_or(GeometryError::EmptyCloud)?;
        let mut coords = Vec::with_capacity(points.len() * dim);
        for (index, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(GeometryError::DimMismatch { index, expected: dim, got: p.len() });
            }
            coords.extend_from_slice(p);
        }
        Self::from_flat(dim, coords, values)
    }

    /// Builds a cloud from row-major flat coordinates.
    pub fn from_flat(dim: usize, coords: Vec<T>, values: Vec<T>) -> Result<Self, GeometryError> {
        if dim == 0 {
            return Err(GeometryError::ZeroDim);
        }
        if values.is_empty() {
            return Err(GeometryError::EmptyCloud);
        }
        if coords.len() != values.len() * dim {
            return Err(GeometryError::LengthMismatch {
                points: coords.len() / dim,
                values: values.len(),
            });
        }
        let cloud = Self { dim, coords, values };
        for i in 0..cloud.len() {
            if !cloud.point(i).iter().all(|c| c.is_finite()) || !cloud.values[i].is_finite() {
                return Err(GeometryError::NonFinite { index: i });
            }
        }
        cloud.check_duplicates()?;
        Ok(cloud)
    }

    fn check_duplicates(&self) -> Result<(), GeometryError> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| lex_cmp(self.point(a), self.point(b)).then(a.cmp(&b)));
        for w in order.windows(2) {
            if self.point(w[0]) == self.point(w[1]) {
                let (first, second) = (w[0].min(w[1]), w[0].max(w[1]));
                return Err(GeometryError::DuplicatePoints { first, second });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[T] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn value(&self, i: usize) -> T {
        self.values[i]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn coords(&self) -> &[T] {
        &self.coords
    }

    /// Same points, new samples.
    pub fn with_values(&self, values: Vec<T>) -> Result<Self, GeometryError> {
        if values.len() != self.len() {
            return Err(GeometryError::LengthMismatch { points: self.len(), values: values.len() });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite { index });
        }
        Ok(Self { dim: self.dim, coords: self.coords.clone(), values })
    }

    /// Reads `x1,..,xn,u` rows; a header row is required.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self, GeometryError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(|e| GeometryError::Csv(e.to_string()))?.clone();
        if headers.len() < 2 {
            return Err(GeometryError::Csv(format!(
                "expected columns x1..xn,u but header has {} column(s)",
                headers.len()
            )));
        }
        let dim = headers.len() - 1;
        let mut coords = Vec::new();
        let mut values = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| GeometryError::Csv(e.to_string()))?;
            for (col, field) in rec.iter().enumerate() {
                let x: f64 = field.parse().map_err(|_| {
                    GeometryError::Csv(format!("row {}, column {}: cannot parse {field:?}", row + 2, col + 1))
                })?;
                if col < dim {
                    coords.push(T::lit(x));
                } else {
                    values.push(T::lit(x));
                }
            }
        }
        Self::from_flat(dim, coords, values)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), GeometryError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (1..=self.dim).map(|i| format!("x{i}")).collect();
        header.push("u".into());
        w.write_record(&header).map_err(|e| GeometryError::Csv(e.to_string()))?;
        for i in 0..self.len() {
            let mut row: Vec<String> = self.point(i).iter().map(|c| fmt_f64(c.as_f64())).collect();
            row.push(fmt_f64(self.values[i].as_f64()));
            w.write_record(&row).map_err(|e| GeometryError::Csv(e.to_string()))?;
        }
        w.flush().map_err(|e| GeometryError::Csv(e.to_string()))
    }
}

/// 17 significant digits, enough for an exact `f64` round trip.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn lex_cmp<T: Scalar>(a: &[T], b: &[T]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y) {
            Some(Ordering::Equal) | None => continue,
            Some(o) => return o,
        }
    }
    Ordering::Equal
}

/// One KNN result: original point index and Euclidean distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor<T> {
    pub index: usize,
    pub distance: T,
}

#[derive(Debug, Clone)]
enum Node<T> {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: T, left: usize, right: usize },
}

/// Immutable KD-tree over a [`PointCloud`].
#[derive(Debug, Clone)]
pub struct SpatialIndex<T> {
    dim: usize,
    coords: Vec<T>,
    perm: Vec<usize>,
    nodes: Vec<Node<T>>,
}

pub fn build_index<T: Scalar>(cloud: &PointCloud<T>) -> Result<SpatialIndex<T>, GeometryError> {
    if cloud.is_empty() {
        return Err(GeometryError::EmptyCloud);
    }
    cloud.check_duplicates()?;
    let mut index = SpatialIndex {
        dim: cloud.dim(),
        coords: cloud.coords().to_vec(),
        perm: (0..cloud.len()).collect(),
        nodes: Vec::new(),
    };
    let n = cloud.len();
    index.build(0, n);
    Ok(index)
}

impl<T: Scalar> SpatialIndex<T> {
    fn coord(&self, p: usize, axis: usize) -> T {
        self.coords[p * self.dim + axis]
    }

    fn point(&self, p: usize) -> &[T] {
        &self.coords[p * self.dim..(p + 1) * self.dim]
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        // split on the axis of widest spread
        let mut axis = 0;
        let mut best = T::neg_infinity();
        for a in 0..self.dim {
            let (mut lo, mut hi) = (T::infinity(), T::neg_infinity());
            for &p in &self.perm[start..end] {
                let c = self.coord(p, a);
                lo = lo.min(c);
                hi = hi.max(c);
            }
            if hi - lo > best {
                best = hi - lo;
                axis = a;
            }
        }
        let mid = start + (end - start) / 2;
        let mut slice = std::mem::take(&mut self.perm);
        slice[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            self.coord(a, axis)
                .partial_cmp(&self.coord(b, axis))
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        self.perm = slice;
        let value = self.coord(self.perm[mid], axis);
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The `k` nearest points to cloud point `query`, itself included.
    pub fn knn(&self, query: usize, k: usize) -> Result<Vec<Neighbor<T>>, GeometryError> {
        if query >= self.len() {
            return Err(GeometryError::QueryOutOfRange { index: query, size: self.len() });
        }
        let q = self.point(query).to_vec();
        self.knn_point(&q, k)
    }

    /// The `k` nearest cloud points to an arbitrary location.
    pub fn knn_point(&self, q: &[T], k: usize) -> Result<Vec<Neighbor<T>>, GeometryError> {
        if k == 0 {
            return Err(GeometryError::KZero);
        }
        if k > self.len() {
            return Err(GeometryError::KTooLarge { k, size: self.len() });
        }
        if q.len() != self.dim {
            return Err(GeometryError::DimMismatch { index: 0, expected: self.dim, got: q.len() });
        }
        let mut heap: BinaryHeap<Candidate<T>> = BinaryHeap::with_capacity(k + 1);
        self.search(0, q, k, &mut heap);
        let mut out: Vec<Candidate<T>> = heap.into_vec();
        out.sort();
        Ok(out
            .into_iter()
            .map(|c| Neighbor { index: c.index, distance: c.d2.sqrt() })
            .collect())
    }

    fn search(&self, node: usize, q: &[T], k: usize, heap: &mut BinaryHeap<Candidate<T>>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &p in &self.perm[start..end] {
                    let cand = Candidate { d2: dist2(self.point(p), q), index: p };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().expect("heap full") {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let delta = q[axis] - value;
                let (near, far) = if delta < T::zero() { (left, right) } else { (right, left) };
                self.search(near, q, k, heap);
                // ties on the worst distance may still improve the index order, hence <=
                if heap.len() < k || delta * delta <= heap.peek().expect("heap nonempty").d2 {
                    self.search(far, q, k, heap);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate<T> {
    d2: T,
    index: usize,
}

impl<T: Scalar> PartialEq for Candidate<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<T: Scalar> Eq for Candidate<T> {}

impl<T: Scalar> PartialOrd for Candidate<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T: Scalar> Ord for Candidate<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2
            .partial_cmp(&other.d2)
            .unwrap_or(Ordering::Equal)
            .then(self.index.cmp(&other.index))
    }
}
