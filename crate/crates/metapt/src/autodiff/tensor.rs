use std::cell::Cell;
use std::rc::Rc;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
    static RECORDING: Cell<bool> = const { Cell::new(true) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

fn recording() -> bool {
    RECORDING.with(|c| c.get())
}

/// Disables graph recording until the guard drops. Ops executed under the
/// guard produce plain constants, which keeps pure inference cheap.
pub struct NoRecordGuard {
    prev: bool,
}

pub fn no_record() -> NoRecordGuard {
    let prev = RECORDING.with(|c| c.replace(false));
    NoRecordGuard { prev }
}

impl Drop for NoRecordGuard {
    fn drop(&mut self) {
        let prev = self.prev;
        RECORDING.with(|c| c.set(prev));
    }
}

pub(crate) struct VjpArgs<'a> {
    pub(crate) out: &'a Tensor,
    pub(crate) grad: &'a Tensor,
    pub(crate) inputs: &'a [Tensor],
    /// Which inputs need an adjoint. Rules may skip slots marked false.
    pub(crate) needs: &'a [bool],
}

pub(crate) type VjpFn = Box<dyn Fn(&VjpArgs) -> Vec<Option<Tensor>>>;

pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) rows: usize,
    pub(crate) cols: usize,
    pub(crate) data: Vec<f64>,
    pub(crate) parents: Vec<Tensor>,
    pub(crate) vjp: Option<VjpFn>,
    pub(crate) requires_grad: bool,
    pub(crate) op: &'static str,
}

/// Immutable rank-2 tensor, cheap to clone. A tensor either tracks
/// gradients (parameter leaf or derived from one while recording) or is a
/// plain constant with no graph attached.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &(self.node.rows, self.node.cols))
            .field("op", &self.node.op)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

fn check_finite(op: &'static str, data: &[f64]) {
    if !data.iter().all(|v| v.is_finite()) {
        panic!("{op}: non-finite value in output");
    }
}

fn make(
    op: &'static str,
    data: Vec<f64>,
    rows: usize,
    cols: usize,
    parents: Vec<Tensor>,
    vjp: Option<VjpFn>,
    requires_grad: bool,
) -> Tensor {
    assert_eq!(data.len(), rows * cols, "{op}: data length does not match shape");
    check_finite(op, &data);
    Tensor {
        node: Rc::new(Node {
            id: fresh_id(),
            rows,
            cols,
            data,
            parents,
            vjp,
            requires_grad,
            op,
        }),
    }
}

impl Tensor {
    pub fn constant(data: Vec<f64>, rows: usize, cols: usize) -> Tensor {
        make("constant", data, rows, cols, vec![], None, false)
    }

    /// Gradient-tracked leaf.
    pub fn param(data: Vec<f64>, rows: usize, cols: usize) -> Tensor {
        make("param", data, rows, cols, vec![], None, true)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(vec![v], 1, 1)
    }

    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor::constant(vec![0.0; rows * cols], rows, cols)
    }

    pub fn ones(rows: usize, cols: usize) -> Tensor {
        Tensor::constant(vec![1.0; rows * cols], rows, cols)
    }

    pub fn rows(&self) -> usize {
        self.node.rows
    }

    pub fn cols(&self) -> usize {
        self.node.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.node.rows, self.node.cols)
    }

    pub fn len(&self) -> usize {
        self.node.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.node.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.node.data.clone()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        assert!(r < self.rows() && c < self.cols(), "get: index out of range");
        self.node.data[r * self.cols() + c]
    }

    /// Scalar value of a [1,1] tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item: tensor is not scalar");
        self.node.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub(crate) fn id(&self) -> u64 {
        self.node.id
    }

    /// Same values, no graph, no gradient tracking.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.to_vec(), self.rows(), self.cols())
    }

    /// Same values as a fresh gradient-tracked leaf.
    pub fn to_param(&self) -> Tensor {
        Tensor::param(self.to_vec(), self.rows(), self.cols())
    }
}

fn unary(op: &'static str, x: &Tensor, data: Vec<f64>, rows: usize, cols: usize, vjp: VjpFn) -> Tensor {
    if recording() && x.node.requires_grad {
        make(op, data, rows, cols, vec![x.clone()], Some(vjp), true)
    } else {
        make(op, data, rows, cols, vec![], None, false)
    }
}

fn binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    data: Vec<f64>,
    rows: usize,
    cols: usize,
    vjp: VjpFn,
) -> Tensor {
    if recording() && (a.node.requires_grad || b.node.requires_grad) {
        make(op, data, rows, cols, vec![a.clone(), b.clone()], Some(vjp), true)
    } else {
        make(op, data, rows, cols, vec![], None, false)
    }
}

fn assert_same_shape(op: &str, a: &Tensor, b: &Tensor) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_same_shape("add", self, other);
        let data = self.data().iter().zip(other.data()).map(|(x, y)| x + y).collect();
        binary("add", self, other, data, self.rows(), self.cols(), Box::new(|a: &VjpArgs| {
            vec![Some(a.grad.clone()), Some(a.grad.clone())]
        }))
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_same_shape("sub", self, other);
        let data = self.data().iter().zip(other.data()).map(|(x, y)| x - y).collect();
        binary("sub", self, other, data, self.rows(), self.cols(), Box::new(|a: &VjpArgs| {
            vec![Some(a.grad.clone()), Some(a.grad.scale(-1.0))]
        }))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Tensor {
        assert_same_shape("mul", self, other);
        let data = self.data().iter().zip(other.data()).map(|(x, y)| x * y).collect();
        binary("mul", self, other, data, self.rows(), self.cols(), Box::new(|a: &VjpArgs| {
            let da = if a.needs[0] { Some(a.grad.mul(&a.inputs[1])) } else { None };
            let db = if a.needs[1] { Some(a.grad.mul(&a.inputs[0])) } else { None };
            vec![da, db]
        }))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|x| x * c).collect();
        unary("scale", self, data, self.rows(), self.cols(), Box::new(move |a: &VjpArgs| {
            vec![Some(a.grad.scale(c))]
        }))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|x| x + c).collect();
        unary("add_scalar", self, data, self.rows(), self.cols(), Box::new(|a: &VjpArgs| {
            vec![Some(a.grad.clone())]
        }))
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (m, k) = self.shape();
        let (k2, n) = other.shape();
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let data = matmul_raw(self.data(), other.data(), m, k, n);
        binary("matmul", self, other, data, m, n, Box::new(|a: &VjpArgs| {
            let da = if a.needs[0] {
                Some(a.grad.matmul(&a.inputs[1].transpose()))
            } else {
                None
            };
            let db = if a.needs[1] {
                Some(a.inputs[0].transpose().matmul(a.grad))
            } else {
                None
            };
            vec![da, db]
        }))
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = self.shape();
        let src = self.data();
        let mut data = vec![0.0; src.len()];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        unary("transpose", self, data, c, r, Box::new(|a: &VjpArgs| {
            vec![Some(a.grad.transpose())]
        }))
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> Tensor {
        assert_eq!(self.len(), rows * cols, "reshape: element count mismatch");
        let (orig_r, orig_c) = self.shape();
        unary("reshape", self, self.to_vec(), rows, cols, Box::new(move |a: &VjpArgs| {
            vec![Some(a.grad.reshape(orig_r, orig_c))]
        }))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Tensor {
        let (r, c) = self.shape();
        assert!(start + len <= r, "slice_rows: {start}+{len} exceeds {r} rows");
        let data = self.data()[start * c..(start + len) * c].to_vec();
        unary("slice_rows", self, data, len, c, Box::new(move |a: &VjpArgs| {
            vec![Some(a.grad.pad_rows(r, start))]
        }))
    }

    /// Embeds into `total` rows of zeros starting at row `offset`.
    pub fn pad_rows(&self, total: usize, offset: usize) -> Tensor {
        let (r, c) = self.shape();
        assert!(offset + r <= total, "pad_rows: {offset}+{r} exceeds {total} rows");
        let mut data = vec![0.0; total * c];
        data[offset * c..(offset + r) * c].copy_from_slice(self.data());
        unary("pad_rows", self, data, total, c, Box::new(move |a: &VjpArgs| {
            vec![Some(a.grad.slice_rows(offset, r))]
        }))
    }

    /// Row lookup: output row i is `self` row `indices[i]`. Duplicate
    /// indices are allowed.
    pub fn gather_rows(&self, indices: &[usize]) -> Tensor {
        let (r, c) = self.shape();
        for &i in indices {
            assert!(i < r, "gather_rows: index {i} out of {r} rows");
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(&self.data()[i * c..(i + 1) * c]);
        }
        let idx: Vec<usize> = indices.to_vec();
        unary("gather_rows", self, data, indices.len(), c, Box::new(move |a: &VjpArgs| {
            vec![Some(a.grad.scatter_add_rows(&idx, r))]
        }))
    }

    /// Adjoint of `gather_rows`: row i of `self` is added into output row
    /// `indices[i]` of a zero matrix with `total` rows. Accumulation runs
    /// in index order, so duplicates sum deterministically.
    pub fn scatter_add_rows(&self, indices: &[usize], total: usize) -> Tensor {
        let (r, c) = self.shape();
        assert_eq!(indices.len(), r, "scatter_add_rows: {} indices for {r} rows", indices.len());
        let mut data = vec![0.0; total * c];
        for (i, &dst) in indices.iter().enumerate() {
            assert!(dst < total, "scatter_add_rows: index {dst} out of {total} rows");
            for j in 0..c {
                data[dst * c + j] += self.data()[i * c + j];
            }
        }
        let idx: Vec<usize> = indices.to_vec();
        unary("scatter_add_rows", self, data, total, c, Box::new(move |a: &VjpArgs| {
            vec![Some(a.grad.gather_rows(&idx))]
        }))
    }

    pub fn sum_all(&self) -> Tensor {
        let (r, c) = self.shape();
        let s: f64 = self.data().iter().sum();
        unary("sum_all", self, vec![s], 1, 1, Box::new(move |a: &VjpArgs| {
            vec![Some(a.grad.broadcast_scalar(r, c))]
        }))
    }

    /// Row sums: [r,c] -> [r,1].
    pub fn sum_cols(&self) -> Tensor {
        let (r, c) = self.shape();
        let data = (0..r)
            .map(|i| self.data()[i * c..(i + 1) * c].iter().sum())
            .collect();
        unary("sum_cols", self, data, r, 1, Box::new(move |a: &VjpArgs| {
            vec![Some(a.grad.broadcast_cols(c))]
        }))
    }

    /// Column sums: [r,c] -> [1,c].
    pub fn sum_rows(&self) -> Tensor {
        let (r, c) = self.shape();
        let mut data = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                data[j] += self.data()[i * c + j];
            }
        }
        unary("sum_rows", self, data, 1, c, Box::new(move |a: &VjpArgs| {
            vec![Some(a.grad.broadcast_rows(r))]
        }))
    }

    /// [r,1] -> [r,cols], repeating the column.
    pub fn broadcast_cols(&self, cols: usize) -> Tensor {
        let (r, c) = self.shape();
        assert_eq!(c, 1, "broadcast_cols: expected a column vector, got [{r},{c}]");
        let mut data = Vec::with_capacity(r * cols);
        for i in 0..r {
            let v = self.data()[i];
            data.extend(std::iter::repeat(v).take(cols));
        }
        unary("broadcast_cols", self, data, r, cols, Box::new(|a: &VjpArgs| {
            vec![Some(a.grad.sum_cols())]
        }))
    }

    /// [1,c] -> [rows,c], repeating the row.
    pub fn broadcast_rows(&self, rows: usize) -> Tensor {
        let (r, c) = self.shape();
        assert_eq!(r, 1, "broadcast_rows: expected a row vector, got [{r},{c}]");
        let mut data = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            data.extend_from_slice(self.data());
        }
        unary("broadcast_rows", self, data, rows, c, Box::new(|a: &VjpArgs| {
            vec![Some(a.grad.sum_rows())]
        }))
    }

    /// [1,1] -> [rows,cols].
    pub fn broadcast_scalar(&self, rows: usize, cols: usize) -> Tensor {
        assert_eq!(self.len(), 1, "broadcast_scalar: expected a scalar");
        let v = self.data()[0];
        unary("broadcast_scalar", self, vec![v; rows * cols], rows, cols, Box::new(|a: &VjpArgs| {
            vec![Some(a.grad.sum_all())]
        }))
    }

    pub fn exp(&self) -> Tensor {
        let data = self.data().iter().map(|x| x.exp()).collect();
        unary("exp", self, data, self.rows(), self.cols(), Box::new(|a: &VjpArgs| {
            vec![Some(a.grad.mul(a.out))]
        }))
    }

    pub fn ln(&self) -> Tensor {
        let data = self.data().iter().map(|x| x.ln()).collect();
        unary("ln", self, data, self.rows(), self.cols(), Box::new(|a: &VjpArgs| {
            vec![Some(a.grad.mul(&a.inputs[0].powf(-1.0)))]
        }))
    }

    /// Elementwise power with constant exponent. Fractional or negative
    /// exponents require positive entries.
    pub fn powf(&self, p: f64) -> Tensor {
        let data = self.data().iter().map(|x| x.powf(p)).collect();
        unary("powf", self, data, self.rows(), self.cols(), Box::new(move |a: &VjpArgs| {
            vec![Some(a.grad.mul(&a.inputs[0].powf(p - 1.0).scale(p)))]
        }))
    }

    pub fn tanh(&self) -> Tensor {
        let data = self.data().iter().map(|x| x.tanh()).collect();
        unary("tanh", self, data, self.rows(), self.cols(), Box::new(|a: &VjpArgs| {
            // 1 - y^2, built from primitives so it stays differentiable.
            let one_minus_sq = a.out.mul(a.out).scale(-1.0).add_scalar(1.0);
            vec![Some(a.grad.mul(&one_minus_sq))]
        }))
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|x| x.max(0.0)).collect();
        // The active-set mask is a constant: piecewise-linear, so higher
        // derivatives through it are zero by construction.
        let mask: Vec<f64> = self.data().iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect();
        let (r, c) = self.shape();
        unary("relu", self, data, r, c, Box::new(move |a: &VjpArgs| {
            let m = Tensor::constant(mask.clone(), a.grad.rows(), a.grad.cols());
            vec![Some(a.grad.mul(&m))]
        }))
    }

    /// Row-wise maxima as a detached [r,1] constant. Used for stable
    /// softmax shifts; shift invariance makes the detachment exact.
    pub fn row_max_detached(&self) -> Tensor {
        let (r, c) = self.shape();
        assert!(c > 0, "row_max_detached: empty rows");
        let data = (0..r)
            .map(|i| {
                self.data()[i * c..(i + 1) * c]
                    .iter()
                    .fold(f64::NEG_INFINITY, |m, &v| m.max(v))
            })
            .collect();
        Tensor::constant(data, r, 1)
    }
}

/// Concatenates along rows; all inputs must share a column count.
pub fn concat_rows(parts: &[Tensor]) -> Tensor {
    assert!(!parts.is_empty(), "concat_rows: no inputs");
    let c = parts[0].cols();
    let mut rows = 0;
    let mut data = Vec::new();
    let mut sizes = Vec::with_capacity(parts.len());
    for p in parts {
        assert_eq!(p.cols(), c, "concat_rows: column mismatch");
        rows += p.rows();
        sizes.push(p.rows());
        data.extend_from_slice(p.data());
    }
    let track = recording() && parts.iter().any(|p| p.node.requires_grad);
    if !track {
        return make("concat_rows", data, rows, c, vec![], None, false);
    }
    let vjp: VjpFn = Box::new(move |a: &VjpArgs| {
        let mut out = Vec::with_capacity(sizes.len());
        let mut offset = 0;
        for (i, &len) in sizes.iter().enumerate() {
            if a.needs[i] {
                out.push(Some(a.grad.slice_rows(offset, len)));
            } else {
                out.push(None);
            }
            offset += len;
        }
        out
    });
    make("concat_rows", data, rows, c, parts.to_vec(), Some(vjp), true)
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (l, &av) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}
