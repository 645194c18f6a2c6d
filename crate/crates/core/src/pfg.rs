//! Proposal feature generation.
//!
//! For every candidate proposal `(t_s, t_e)` with `t_s < t_e` the layer samples
//! a fixed number of locations from three regions of the input sequence:
//!
//! * left:   `[t_s - d/k, t_s + d/k]`, `N_l` evenly spaced samples
//! * center: `[t_s, t_e]`,             `N_c` evenly spaced samples
//! * right:  `[t_e - d/k, t_e + d/k]`, `N_r` evenly spaced samples
//!
//! with `d = t_e - t_s`. Each sample is read by linear interpolation between
//! its two neighbouring grid locations, so the layer is linear in its input
//! and its backward pass scatters the same two weights.
//!
//! Every branch uses its own local sample index starting at zero, so the
//! samples span exactly the three regions. Interpolation terms whose grid
//! index falls outside `[0, L-1]` contribute zero. Cells with `t_s >= t_e`
//! carry an all-zero feature.
//!
//! Besides the dense `L×L×N×C` form this module provides a compact layout
//! over the `L(L-1)/2` valid cells (plus one shared zero cell, see
//! [`ProposalCells`]) and a fused sampling + sample-axis projection used by
//! the boundary branch, which never materializes the four-axis tensor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Layout, Real, Tensor};

/// Sample counts per region and the region divisor `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub left: usize,
    pub center: usize,
    pub right: usize,
    pub k: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            left: 8,
            center: 16,
            right: 8,
            k: 5.0,
        }
    }
}

impl SamplingConfig {
    pub fn new(left: usize, center: usize, right: usize) -> Self {
        Self {
            left,
            center,
            right,
            ..Self::default()
        }
    }

    /// Total samples per proposal, `N = N_l + N_c + N_r`.
    pub fn total(&self) -> usize {
        self.left + self.center + self.right
    }

    /// A region may be disabled with a count of zero; enabled regions need
    /// at least two samples so that both of their endpoints are hit.
    pub fn validate(&self) -> Result<()> {
        for (name, n) in [("left", self.left), ("center", self.center), ("right", self.right)] {
            if n == 1 {
                return Err(Error::Invalid(format!(
                    "{name} sample count must be 0 or at least 2, got 1"
                )));
            }
        }
        if self.total() == 0 {
            return Err(Error::Invalid("at least one sampling region must be enabled".into()));
        }
        if !(self.k.is_finite() && self.k > 0.0) {
            return Err(Error::Invalid(format!("region divisor k must be positive, got {}", self.k)));
        }
        Ok(())
    }

    /// Parses the `N_l/N_c/N_r` notation, e.g. `8/16/8`.
    pub fn parse_counts(spec: &str) -> Result<Self> {
        let parts: Vec<&str> = spec.trim().split('/').collect();
        let bad = || Error::Invalid(format!("expected N_l/N_c/N_r, got {spec:?}"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let mut counts = [0usize; 3];
        for (slot, p) in counts.iter_mut().zip(&parts) {
            *slot = p.trim().parse().map_err(|_| bad())?;
        }
        let cfg = Self::new(counts[0], counts[1], counts[2]);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn label(&self) -> String {
        format!("{}/{}/{}", self.left, self.center, self.right)
    }
}

/// One interpolated sample: `w_left * f[left] + w_right * f[left + 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleTap {
    pub position: f64,
    pub left: isize,
    pub w_left: f64,
    pub w_right: f64,
}

impl SampleTap {
    fn at(position: f64) -> Self {
        let left = position.floor();
        let w_left = (left + 1.0) - position;
        Self {
            position,
            left: left as isize,
            w_left,
            w_right: 1.0 - w_left,
        }
    }

    pub fn right(&self) -> isize {
        self.left + 1
    }
}

/// Sample positions and interpolation weights for one proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePlan {
    pub t_start: usize,
    pub t_end: usize,
    pub config: SamplingConfig,
    pub taps: Vec<SampleTap>,
}

/// Computes the sampling taps of proposal `(t_start, t_end)` on a length-`length` grid.
pub fn sample_plan(
    t_start: usize,
    t_end: usize,
    config: &SamplingConfig,
    length: usize,
) -> Result<SamplePlan> {
    config.validate()?;
    if t_start >= t_end {
        return Err(Error::Invalid(format!(
            "sample_plan needs t_s < t_e, got ({t_start}, {t_end})"
        )));
    }
    if t_end >= length {
        return Err(Error::Invalid(format!(
            "proposal end {t_end} outside a grid of length {length}"
        )));
    }
    let mut taps = Vec::with_capacity(config.total());
    push_taps(&mut taps, t_start as f64, t_end as f64, config);
    Ok(SamplePlan {
        t_start,
        t_end,
        config: *config,
        taps,
    })
}

fn push_taps(taps: &mut Vec<SampleTap>, ts: f64, te: f64, cfg: &SamplingConfig) {
    let dg = te - ts;
    let k = cfg.k;
    if cfg.left > 0 {
        let step = 2.0 * dg / (k * (cfg.left - 1) as f64);
        for m in 0..cfg.left {
            taps.push(SampleTap::at(ts - dg / k + step * m as f64));
        }
    }
    if cfg.center > 0 {
        let step = dg / (cfg.center - 1) as f64;
        for m in 0..cfg.center {
            taps.push(SampleTap::at(ts + step * m as f64));
        }
    }
    if cfg.right > 0 {
        let step = 2.0 * dg / (k * (cfg.right - 1) as f64);
        for m in 0..cfg.right {
            taps.push(SampleTap::at(te - dg / k + step * m as f64));
        }
    }
}

/// Compact enumeration of the proposal cells of an `L×L` map.
///
/// Cells `(i, j)` with `i < j` are numbered row-major; one extra trailing
/// cell stands for every position with `i >= j`, whose proposal feature is
/// identically zero, so all of them share a single network evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalCells {
    length: usize,
    cells: Vec<(usize, usize)>,
}

impl ProposalCells {
    pub fn new(length: usize) -> Self {
        let mut cells = Vec::with_capacity(length * length.saturating_sub(1) / 2);
        for i in 0..length {
            for j in i + 1..length {
                cells.push((i, j));
            }
        }
        Self { length, cells }
    }

    pub fn length(&self) -> usize {
        self.length
    }

    /// Number of valid `(i < j)` cells, `L(L-1)/2`.
    pub fn valid(&self) -> usize {
        self.cells.len()
    }

    /// Rows of a compact tensor: the valid cells plus the shared zero cell.
    pub fn rows(&self) -> usize {
        self.cells.len() + 1
    }

    pub fn null_row(&self) -> usize {
        self.cells.len()
    }

    pub fn cells(&self) -> &[(usize, usize)] {
        &self.cells
    }

    /// Compact row holding map position `(i, j)`.
    pub fn row_of(&self, i: usize, j: usize) -> usize {
        if i < j {
            let l = self.length;
            // rows before i: sum_{r<i} (l - 1 - r)
            i * (2 * l - i - 1) / 2 + (j - i - 1)
        } else {
            self.null_row()
        }
    }

    /// Expands channel `channel` of a `rows × width` compact tensor to an `L×L` map.
    pub fn to_map<T: Real>(&self, compact: &Tensor<T>, channel: usize) -> Tensor<T> {
        let width = compact.last_dim();
        let l = self.length;
        let data = compact.data();
        let null = data[self.null_row() * width + channel];
        let mut map = Tensor::full(&[l, l], null);
        for (row, &(i, j)) in self.cells.iter().enumerate() {
            map.set2(i, j, data[row * width + channel]);
        }
        map
    }

    /// Adjoint of [`Self::to_map`]: accumulates an `L×L` gradient into one channel
    /// of a `rows × width` compact gradient.
    pub fn accumulate_from_map<T: Real>(
        &self,
        map_grad: &Tensor<T>,
        channel: usize,
        compact_grad: &mut Tensor<T>,
    ) {
        let width = compact_grad.last_dim();
        let l = self.length;
        let g = compact_grad.data_mut();
        let mut null = T::zero();
        for i in 0..l {
            for j in 0..l {
                let v = map_grad.get2(i, j);
                if i < j {
                    let row = self.row_of(i, j);
                    g[row * width + channel] = g[row * width + channel] + v;
                } else {
                    null = null + v;
                }
            }
        }
        let idx = self.null_row() * width + channel;
        g[idx] = g[idx] + null;
    }
}

/// Precomputed taps for every valid cell of a length-`L` grid.
#[derive(Debug, Clone)]
pub struct PfgPlan {
    cells: ProposalCells,
    config: SamplingConfig,
    taps: Vec<SampleTap>,
}

impl PfgPlan {
    pub fn new(length: usize, config: SamplingConfig) -> Result<Self> {
        config.validate()?;
        if length < 2 {
            return Err(Error::Invalid(format!(
                "proposal feature generation needs L >= 2, got {length}"
            )));
        }
        let cells = ProposalCells::new(length);
        let mut taps = Vec::with_capacity(cells.valid() * config.total());
        for &(i, j) in cells.cells() {
            push_taps(&mut taps, i as f64, j as f64, &config);
        }
        Ok(Self {
            cells,
            config,
            taps,
        })
    }

    pub fn length(&self) -> usize {
        self.cells.length()
    }

    pub fn samples(&self) -> usize {
        self.config.total()
    }

    pub fn config(&self) -> &SamplingConfig {
        &self.config
    }

    pub fn cells(&self) -> &ProposalCells {
        &self.cells
    }

    /// Taps of valid cell number `row`.
    pub fn cell_taps(&self, row: usize) -> &[SampleTap] {
        let n = self.samples();
        &self.taps[row * n..(row + 1) * n]
    }

    /// Grid indices and weights of the in-range interpolation terms of a tap.
    fn terms<T: Real>(&self, tap: &SampleTap) -> [(Option<usize>, T); 2] {
        let l = self.length() as isize;
        let idx = |t: isize| (0..l).contains(&t).then_some(t as usize);
        [
            (idx(tap.left), T::lit(tap.w_left)),
            (idx(tap.right()), T::lit(tap.w_right)),
        ]
    }

    fn check_input<T: Real>(&self, op: &'static str, input: &Tensor<T>) -> Result<usize> {
        if input.rank() != 2 || input.dim(0) != self.length() {
            return Err(Error::shape(
                op,
                format!("expected L×C input with L={}, got {:?}", self.length(), input.shape()),
            ));
        }
        Ok(input.dim(1))
    }

    /// Dense forward pass: `L×C` → `L×L×N×C`.
    pub fn forward_dense<T: Real>(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let c = self.check_input("pfg_forward", input)?;
        let (l, n) = (self.length(), self.samples());
        let mut out = Tensor::zeros(&[l, l, n, c]);
        let src = input.data();
        let dst = out.data_mut();
        for (row, &(i, j)) in self.cells.cells().iter().enumerate() {
            for (s, tap) in self.cell_taps(row).iter().enumerate() {
                let base = ((i * l + j) * n + s) * c;
                let [(tl, wl), (tr, wr)] = self.terms::<T>(tap);
                for ch in 0..c {
                    let mut v = T::zero();
                    if let Some(t) = tl {
                        v = wl * src[t * c + ch];
                    }
                    if let Some(t) = tr {
                        v = v + wr * src[t * c + ch];
                    }
                    dst[base + ch] = v;
                }
            }
        }
        Ok(out)
    }

    /// Dense backward pass: `L×L×N×C` upstream gradient → `L×C`.
    ///
    /// Entries of the upstream gradient at `t_s >= t_e` are ignored, matching
    /// the zero rule of the forward pass.
    pub fn backward_dense<T: Real>(&self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (l, n) = (self.length(), self.samples());
        if grad_out.rank() != 4 || grad_out.shape()[..3] != [l, l, n] {
            return Err(Error::shape(
                "pfg_backward",
                format!("expected {l}×{l}×{n}×C gradient, got {:?}", grad_out.shape()),
            ));
        }
        let c = grad_out.dim(3);
        let mut grad_in = Tensor::zeros(&[l, c]);
        let g = grad_out.data();
        let gi = grad_in.data_mut();
        for (row, &(i, j)) in self.cells.cells().iter().enumerate() {
            for (s, tap) in self.cell_taps(row).iter().enumerate() {
                let base = ((i * l + j) * n + s) * c;
                for (t, w) in self.terms::<T>(tap) {
                    if let Some(t) = t {
                        for ch in 0..c {
                            gi[t * c + ch] = gi[t * c + ch] + w * g[base + ch];
                        }
                    }
                }
            }
        }
        Ok(grad_in)
    }

    /// Compact forward pass: `L×C` → `rows×N×C`, the last row being the zero cell.
    pub fn forward_cells<T: Real>(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let c = self.check_input("pfg_cells", input)?;
        let n = self.samples();
        let mut out = Tensor::zeros(&[self.cells.rows(), n, c]);
        let src = input.data();
        let dst = out.data_mut();
        for row in 0..self.cells.valid() {
            for (s, tap) in self.cell_taps(row).iter().enumerate() {
                let base = (row * n + s) * c;
                let [(tl, wl), (tr, wr)] = self.terms::<T>(tap);
                for ch in 0..c {
                    let mut v = T::zero();
                    if let Some(t) = tl {
                        v = wl * src[t * c + ch];
                    }
                    if let Some(t) = tr {
                        v = v + wr * src[t * c + ch];
                    }
                    dst[base + ch] = v;
                }
            }
        }
        Ok(out)
    }

    pub fn backward_cells<T: Real>(&self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.samples();
        if grad_out.rank() != 3 || grad_out.shape()[..2] != [self.cells.rows(), n] {
            return Err(Error::shape(
                "pfg_cells_backward",
                format!("unexpected gradient shape {:?}", grad_out.shape()),
            ));
        }
        let c = grad_out.dim(2);
        let mut grad_in = Tensor::zeros(&[self.length(), c]);
        let g = grad_out.data();
        let gi = grad_in.data_mut();
        for row in 0..self.cells.valid() {
            for (s, tap) in self.cell_taps(row).iter().enumerate() {
                let base = (row * n + s) * c;
                for (t, w) in self.terms::<T>(tap) {
                    if let Some(t) = t {
                        for ch in 0..c {
                            gi[t * c + ch] = gi[t * c + ch] + w * g[base + ch];
                        }
                    }
                }
            }
        }
        Ok(grad_in)
    }

    /// Sampling fused with a full projection of each cell's `N×C` block:
    /// `out[m, o] = bias[o] + Σ_{n,c} weight[n, c, o] · f^p[m, n, c]`.
    ///
    /// Because sampling is linear, the input is first projected per sample
    /// index (`proj[n] = input · weight[n]`, an `L×O` matrix) and the cell
    /// outputs are then interpolated from those projections.
    pub fn forward_collapse<T: Real>(
        &self,
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let (c, o) = self.check_collapse("pfg_collapse", input, weight, bias)?;
        let (l, n) = (self.length(), self.samples());
        let mut proj = vec![T::zero(); n * l * o];
        for s in 0..n {
            gemm(
                l,
                c,
                o,
                input.data(),
                Layout::Plain,
                &weight.data()[s * c * o..(s + 1) * c * o],
                Layout::Plain,
                &mut proj[s * l * o..(s + 1) * l * o],
                false,
            );
        }
        let mut out = Tensor::zeros(&[self.cells.rows(), o]);
        let b = bias.data();
        for row in out.data_mut().chunks_exact_mut(o) {
            row.copy_from_slice(b);
        }
        let dst = out.data_mut();
        for row in 0..self.cells.valid() {
            let acc = &mut dst[row * o..(row + 1) * o];
            for (s, tap) in self.cell_taps(row).iter().enumerate() {
                for (t, w) in self.terms::<T>(tap) {
                    if let Some(t) = t {
                        let src = &proj[(s * l + t) * o..(s * l + t + 1) * o];
                        for (a, &p) in acc.iter_mut().zip(src) {
                            *a = *a + w * p;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Gradients of [`Self::forward_collapse`] w.r.t. input, weight and bias.
    pub fn backward_collapse<T: Real>(
        &self,
        grad_out: &Tensor<T>,
        input: &Tensor<T>,
        weight: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let (l, n) = (self.length(), self.samples());
        let c = self.check_input("pfg_collapse_backward", input)?;
        let o = grad_out.last_dim();
        if grad_out.shape() != [self.cells.rows(), o] || weight.shape() != [n, c, o] {
            return Err(Error::shape(
                "pfg_collapse_backward",
                format!(
                    "gradient {:?} / weight {:?} inconsistent with plan",
                    grad_out.shape(),
                    weight.shape()
                ),
            ));
        }
        let g = grad_out.data();
        let mut grad_bias = Tensor::zeros(&[o]);
        for row in g.chunks_exact(o) {
            for (a, &v) in grad_bias.data_mut().iter_mut().zip(row) {
                *a = *a + v;
            }
        }
        // scatter into per-sample projection gradients
        let mut grad_proj = vec![T::zero(); n * l * o];
        for row in 0..self.cells.valid() {
            let src = &g[row * o..(row + 1) * o];
            for (s, tap) in self.cell_taps(row).iter().enumerate() {
                for (t, w) in self.terms::<T>(tap) {
                    if let Some(t) = t {
                        let dst = &mut grad_proj[(s * l + t) * o..(s * l + t + 1) * o];
                        for (a, &v) in dst.iter_mut().zip(src) {
                            *a = *a + w * v;
                        }
                    }
                }
            }
        }
        let mut grad_input = Tensor::zeros(&[l, c]);
        let mut grad_weight = Tensor::zeros(&[n, c, o]);
        for s in 0..n {
            let gp = &grad_proj[s * l * o..(s + 1) * l * o];
            let ws = &weight.data()[s * c * o..(s + 1) * c * o];
            // input grad: gp (L×O) · ws^T (O×C)
            gemm(l, o, c, gp, Layout::Plain, ws, Layout::Transposed, grad_input.data_mut(), true);
            // weight grad: input^T (C×L) · gp (L×O)
            gemm(
                c,
                l,
                o,
                input.data(),
                Layout::Transposed,
                gp,
                Layout::Plain,
                &mut grad_weight.data_mut()[s * c * o..(s + 1) * c * o],
                false,
            );
        }
        Ok((grad_input, grad_weight, grad_bias))
    }

    fn check_collapse<T: Real>(
        &self,
        op: &'static str,
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
    ) -> Result<(usize, usize)> {
        let c = self.check_input(op, input)?;
        let n = self.samples();
        if weight.rank() != 3 || weight.dim(0) != n || weight.dim(1) != c {
            return Err(Error::shape(
                op,
                format!("weight {:?} does not match N={n}, C={c}", weight.shape()),
            ));
        }
        let o = weight.dim(2);
        if bias.shape() != [o] {
            return Err(Error::shape(op, format!("bias {:?} vs {o} outputs", bias.shape())));
        }
        Ok((c, o))
    }
}
