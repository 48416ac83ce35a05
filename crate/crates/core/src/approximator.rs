//! Constructive universal approximation with DAC networks.
//!
//! The building block is the piecewise-linear spike `psi_d(x) = (1-|x|_1)+`,
//! which three ReLU edges realize in 1-d and a d-layer DAC network realizes in
//! d dimensions. Rescaled spikes `psi_{d,delta}(x) = C_d delta^-d
//! psi_d(x/delta)` integrate to one and approximate the Dirac delta, so a
//! Riemann sum of `f * psi_{d,delta}` over a uniform partition of the cube
//! approximates `f` uniformly. The sum itself merges the shifted spike
//! networks, sharing the pass-through units, into a d-layer DAC network whose
//! layer `l < d` has `2k + d - l` units of at most 4 inputs each.
//!
//! Deep spike construction used here, writing `t_i` for
//! `delta * psi_i((x_{1..i} - c_{1..i})/delta)`:
//!
//! - carriers `x_j + 1 = relu(1 + x_j)` are kept in the original input scale,
//!   so their validity only needs `x_j >= -1`, independent of `delta`;
//! - layer 1 realizes `t_1` with input biases `(-c_1 - delta, -c_1,
//!   -c_1 + delta)` and weights `(1, -2, 1)`;
//! - layer i units `x_{i+1} + 1 +- t_i` use the bias `-1 - c_i` on the three
//!   carrier edges, since `relu(-1 - c_i + [x_i + 1 +- t_{i-1}])` terms
//!   combine to `t_i = (t_{i-1} - |x_i - c_i|)+`;
//! - the last layer absorbs the normalization: a final weight `W` on the
//!   `t_d` triple yields `W * delta * psi_d((x-c)/delta)`.
//!
//! Near the cube boundary part of the spike's mass would fall outside the
//! sampled partition, so the emitted approximant evaluates the merged network
//! at `s*x` with `s = 1 - delta` (a first-layer rescaling) and samples `f` at
//! the clamped pull-backs `clamp(c/s)`. Cell centers stay inside the cube and
//! the layer widths are untouched.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DacError, Result};
use crate::layers::DenseDacParams;
use crate::netspec::{DacEdge, DenseDacEdgesLayer, LayerSpec, NetworkSpec};
use crate::ops::Activation;
use crate::tensor::Tensor;

/// Target functions are evaluated on points of `[-1,1]^d`.
pub type TargetFn = dyn Fn(&[f64]) -> f64 + Sync;

/// `(1 - |x|)+`.
pub fn spike_1d(x: f64) -> f64 {
    (1.0 - x.abs()).max(0.0)
}

/// `(1 - sum_j |x_j|)+`.
pub fn spike_nd(x: &[f64]) -> f64 {
    (1.0 - x.iter().map(|v| v.abs()).sum::<f64>()).max(0.0)
}

/// `C_d = 2^-d (d+1)!`, the coefficient that makes `C_d psi_d` integrate to 1.
pub fn normalization_const(d: usize) -> f64 {
    assert!(d >= 1, "dimension must be >= 1");
    let mut fact = 1.0;
    for i in 2..=(d + 1) {
        fact *= i as f64;
    }
    0.5f64.powi(d as i32) * fact
}

/// Single-unit DAC layer over the input replicated 3 times computing
/// `psi_{1,delta}(x) = delta^-1 psi_1(x/delta)`: weights `delta^-2 [1,-2,1]`,
/// DAC biases `[-delta, 0, delta]`.
pub fn spike_1d_as_dac(delta: f64) -> Result<DenseDacParams> {
    if delta <= 0.0 {
        return Err(DacError::Contract(format!("delta must be > 0, got {delta}")));
    }
    let c = delta.powi(-2);
    DenseDacParams::new(
        Tensor::from_rows(&[vec![c, -2.0 * c, c]])?,
        Tensor::from_rows(&[vec![-delta, 0.0, delta]])?,
        None,
        Activation::None,
    )
}

/// Evaluates a single-unit DAC layer over a replicated scalar input.
pub fn eval_replicated_dac(p: &DenseDacParams, x: f64) -> Result<f64> {
    let m = p.in_dim();
    let xs = Tensor::from_vec(vec![x; m]);
    let out = crate::layers::dense_dac_forward(p, &xs.reshaped(vec![1, m])?)?;
    Ok(out.data()[0])
}

// ---------------------------------------------------------------------------
// Deep spike networks
// ---------------------------------------------------------------------------

/// A cell of the merged construction: spike center and the weight applied to
/// the carried `t_d` value of that cell (the layer-d triple coefficient).
struct SpikeCell {
    center: Vec<f64>,
    final_weight: f64,
}

/// Merges `cells.len()` shifted deep spikes into one d-layer DAC network
/// computing `sum_c W_c * delta * psi_d((x - c)/delta)`, evaluated at `s*x`
/// via the first-layer rescaling. Valid on `x_j >= -1` (carriers saturate
/// below).
fn emit_merged_deep(
    d: usize,
    delta: f64,
    cells: &[SpikeCell],
    input_scale: f64,
) -> Result<NetworkSpec> {
    if d < 1 {
        return Err(DacError::Contract("dimension must be >= 1".into()));
    }
    if delta <= 0.0 {
        return Err(DacError::Contract(format!("delta must be > 0, got {delta}")));
    }
    let k = cells.len();
    let s = input_scale;
    // First-layer rescaling h~(x) = h(s x): every first-layer edge (w, b)
    // becomes (s w, b / s).
    let scale_edge = |w: f64, b: f64| (s * w, b / s);

    if d == 1 {
        // Single unit over the input replicated 3k times; dense form.
        let m = 3 * k;
        let mut weights = vec![0.0; m];
        let mut biases = vec![0.0; m];
        for (q, cell) in cells.iter().enumerate() {
            let c = cell.center[0];
            let w = cell.final_weight;
            let triple = [(w, -c - delta), (-2.0 * w, -c), (w, -c + delta)];
            for (slot, (w0, b0)) in triple.into_iter().enumerate() {
                let (we, be) = scale_edge(w0, b0);
                weights[3 * q + slot] = we;
                biases[3 * q + slot] = be;
            }
        }
        return Ok(NetworkSpec::new(vec![
            LayerSpec::Replicate { factor: m },
            LayerSpec::DenseDac(DenseDacParams::new(
                Tensor::new(vec![1, m], weights)?,
                Tensor::new(vec![1, m], biases)?,
                None,
                Activation::None,
            )?),
        ]));
    }

    let mut layers = vec![LayerSpec::Replicate { factor: 3 }];

    // Layer 1: units [u+, u- per cell] then pass-throughs for x_2..x_d.
    // Input positions: copy r of x_j sits at r*d + (j-1).
    {
        let out_dim = 2 * k + d - 1;
        let mut edges = Vec::new();
        for (q, cell) in cells.iter().enumerate() {
            let c1 = cell.center[0];
            for (unit, sign) in [(2 * q, 1.0), (2 * q + 1, -1.0)] {
                // carrier x_2 + 1
                let (w, b) = scale_edge(1.0, 1.0);
                edges.push(DacEdge {
                    unit,
                    input: 1,
                    weight: w,
                    bias: b,
                });
                // spike triple on the three copies of x_1
                for (copy, (w0, b0)) in [
                    (0usize, (sign, -c1 - delta)),
                    (1, (-2.0 * sign, -c1)),
                    (2, (sign, -c1 + delta)),
                ] {
                    let (w, b) = scale_edge(w0, b0);
                    edges.push(DacEdge {
                        unit,
                        input: copy * d,
                        weight: w,
                        bias: b,
                    });
                }
            }
        }
        for j in 2..=d {
            let (w, b) = scale_edge(1.0, 1.0);
            edges.push(DacEdge {
                unit: 2 * k + (j - 2),
                input: j - 1,
                weight: w,
                bias: b,
            });
        }
        layers.push(LayerSpec::DenseDacEdges(DenseDacEdgesLayer {
            in_dim: 3 * d,
            out_dim,
            edges,
            out_bias: None,
            out_activation: Activation::None,
        }));
    }

    // Layers 2..=d-1. Previous layer units: u+(q)=2q, u-(q)=2q+1,
    // pass(j) = 2k + (j - i) carrying x_j for j in i..=d.
    for i in 2..d {
        let in_dim = 2 * k + d - i + 1;
        let out_dim = 2 * k + d - i;
        let prev_pass = |j: usize| 2 * k + (j - i);
        let mut edges = Vec::new();
        for (q, cell) in cells.iter().enumerate() {
            let ci = cell.center[i - 1];
            for (unit, sign) in [(2 * q, 1.0), (2 * q + 1, -1.0)] {
                edges.push(DacEdge {
                    unit,
                    input: prev_pass(i + 1),
                    weight: 1.0,
                    bias: 0.0,
                });
                edges.push(DacEdge {
                    unit,
                    input: 2 * q,
                    weight: sign,
                    bias: -1.0 - ci,
                });
                edges.push(DacEdge {
                    unit,
                    input: prev_pass(i),
                    weight: -2.0 * sign,
                    bias: -1.0 - ci,
                });
                edges.push(DacEdge {
                    unit,
                    input: 2 * q + 1,
                    weight: sign,
                    bias: -1.0 - ci,
                });
            }
        }
        // pass-throughs for x_{i+1}..x_d, re-indexed to 2k + (j - (i+1))
        for j in (i + 1)..=d {
            edges.push(DacEdge {
                unit: 2 * k + (j - i - 1),
                input: prev_pass(j),
                weight: 1.0,
                bias: 0.0,
            });
        }
        layers.push(LayerSpec::DenseDacEdges(DenseDacEdgesLayer {
            in_dim,
            out_dim,
            edges,
            out_bias: None,
            out_activation: Activation::None,
        }));
    }

    // Layer d: one unit; previous layer has u+-(q) and pass(d) at 2k.
    {
        let in_dim = 2 * k + 1;
        let mut edges = Vec::new();
        // Middle edges share the pass-through parent; merge identical
        // (input, bias) pairs by summing weights.
        let mut middle: std::collections::BTreeMap<u64, (f64, f64)> =
            std::collections::BTreeMap::new();
        for (q, cell) in cells.iter().enumerate() {
            let cd = cell.center[d - 1];
            let w = cell.final_weight;
            edges.push(DacEdge {
                unit: 0,
                input: 2 * q,
                weight: w,
                bias: -1.0 - cd,
            });
            edges.push(DacEdge {
                unit: 0,
                input: 2 * q + 1,
                weight: w,
                bias: -1.0 - cd,
            });
            let key = (-1.0 - cd).to_bits();
            let entry = middle.entry(key).or_insert((0.0, -1.0 - cd));
            entry.0 += -2.0 * w;
        }
        for (_, (w, b)) in middle {
            edges.push(DacEdge {
                unit: 0,
                input: 2 * k,
                weight: w,
                bias: b,
            });
        }
        layers.push(LayerSpec::DenseDacEdges(DenseDacEdgesLayer {
            in_dim,
            out_dim: 1,
            edges,
            out_bias: None,
            out_activation: Activation::None,
        }));
    }

    Ok(NetworkSpec::new(layers))
}

/// d-layer DAC network computing `coeff * psi_d((x - c)/delta)` on
/// `[-1,1]^d` (more generally on `x_j >= -1`).
pub fn deep_spike_network(d: usize, c: &[f64], delta: f64, coeff: f64) -> Result<NetworkSpec> {
    if c.len() != d {
        return Err(DacError::Contract(format!(
            "shift has {} coordinates for dimension {d}",
            c.len()
        )));
    }
    let cells = [SpikeCell {
        center: c.to_vec(),
        final_weight: coeff / delta,
    }];
    emit_merged_deep(d, delta, &cells, 1.0)
}

/// The Dirac-approximating spike as a network:
/// `psi_{d,delta}(x - c) = C_d delta^-d psi_d((x - c)/delta)`.
pub fn spike_nd_deep_network(d: usize, c: &[f64], delta: f64) -> Result<NetworkSpec> {
    deep_spike_network(d, c, delta, normalization_const(d) * delta.powi(-(d as i32)))
}

/// The 2-layer realization `psi_d(x) = relu(1 - d + sum_j [relu(x_j + 1) -
/// 2 relu(x_j)])`, with the input replicated twice.
pub fn spike_nd_shallow_network(d: usize) -> Result<NetworkSpec> {
    if d < 1 {
        return Err(DacError::Contract("dimension must be >= 1".into()));
    }
    // Layer 1: one unit with 2d inputs; copy 0 carries biases 1, copy 1
    // biases 0 with weight -2.
    let m = 2 * d;
    let mut weights = vec![0.0; m];
    let mut biases = vec![0.0; m];
    for j in 0..d {
        weights[j] = 1.0;
        biases[j] = 1.0;
        weights[d + j] = -2.0;
        biases[d + j] = 0.0;
    }
    let hidden = DenseDacParams::new(
        Tensor::new(vec![1, m], weights)?,
        Tensor::new(vec![1, m], biases)?,
        None,
        Activation::None,
    )?;
    // Layer 2: relu(1 - d + u) as a single DAC edge.
    let outer = DenseDacParams::new(
        Tensor::new(vec![1, 1], vec![1.0])?,
        Tensor::new(vec![1, 1], vec![1.0 - d as f64])?,
        None,
        Activation::None,
    )?;
    Ok(NetworkSpec::new(vec![
        LayerSpec::Replicate { factor: 2 },
        LayerSpec::DenseDac(hidden),
        LayerSpec::DenseDac(outer),
    ]))
}

/// Rescales a network's first DAC layer so that `rescaled(x) = net(lambda x)`
/// exactly: every first-layer edge `(w, b)` becomes `(lambda w, b / lambda)`.
pub fn rescale_first_layer(net: &NetworkSpec, lambda: f64) -> Result<NetworkSpec> {
    if lambda <= 0.0 {
        return Err(DacError::Contract(format!(
            "rescaling requires lambda > 0, got {lambda}"
        )));
    }
    let mut out = net.clone();
    for layer in &mut out.layers {
        match layer {
            LayerSpec::Replicate { .. } => continue,
            LayerSpec::DenseDac(p) => {
                p.weights = p.weights.map(|w| lambda * w);
                p.dac_biases = p.dac_biases.map(|b| b / lambda);
                return Ok(out);
            }
            LayerSpec::DenseDacEdges(p) => {
                for e in &mut p.edges {
                    e.weight *= lambda;
                    e.bias /= lambda;
                }
                return Ok(out);
            }
            _ => {
                return Err(DacError::Contract(
                    "first non-replicate layer is not a DAC dense layer".into(),
                ))
            }
        }
    }
    Err(DacError::Contract("network has no DAC layer".into()))
}

// ---------------------------------------------------------------------------
// Riemann-sum approximants
// ---------------------------------------------------------------------------

/// Plan of a Riemann-sum approximant: a uniform partition of `[-1,1]^d` into
/// `k = mesh^d` cells with center points, the sampled values, and the
/// boundary rescale factor applied to the emitted network's first layer.
#[derive(Debug, Clone)]
pub struct ApproxPlan {
    pub dim: usize,
    pub mesh: usize,
    pub cell_count: usize,
    pub delta: f64,
    /// Cell centers, each in `[-1,1]^d`.
    pub centers: Vec<Vec<f64>>,
    /// `f(clamp(c / input_scale))` per center.
    pub values: Vec<f64>,
    /// `s = 1 - delta` (or 1 when the boundary rescale is disabled).
    pub input_scale: f64,
}

impl ApproxPlan {
    pub fn build(
        f: &TargetFn,
        d: usize,
        delta: f64,
        mesh: usize,
        boundary_rescale: bool,
    ) -> Result<Self> {
        if delta <= 0.0 {
            return Err(DacError::Contract(format!("delta must be > 0, got {delta}")));
        }
        if mesh < 1 {
            return Err(DacError::Contract("mesh must be >= 1".into()));
        }
        if boundary_rescale && delta >= 1.0 {
            return Err(DacError::Contract(
                "boundary rescale requires delta < 1".into(),
            ));
        }
        let s = if boundary_rescale { 1.0 - delta } else { 1.0 };
        let k = mesh.pow(d as u32);
        let h = 2.0 / mesh as f64;
        let mut centers = Vec::with_capacity(k);
        let mut values = Vec::with_capacity(k);
        let mut idx = vec![0usize; d];
        loop {
            let center: Vec<f64> = idx
                .iter()
                .map(|&i| -1.0 + (2.0 * i as f64 + 1.0) * h / 2.0)
                .collect();
            let sample: Vec<f64> = center.iter().map(|&c| (c / s).clamp(-1.0, 1.0)).collect();
            values.push(f(&sample));
            centers.push(center);
            // odometer increment
            let mut axis = 0;
            loop {
                if axis == d {
                    break;
                }
                idx[axis] += 1;
                if idx[axis] < mesh {
                    break;
                }
                idx[axis] = 0;
                axis += 1;
            }
            if axis == d {
                break;
            }
        }
        debug_assert_eq!(centers.len(), k);
        Ok(ApproxPlan {
            dim: d,
            mesh,
            cell_count: k,
            delta,
            centers,
            values,
            input_scale: s,
        })
    }

    /// Emits the merged d-layer DAC network realizing
    /// `g(x) = sum_c 2^d k^-1 f_c psi_{d,delta}(s x - c)`.
    pub fn emit(&self) -> Result<NetworkSpec> {
        let d = self.dim;
        let k = self.cell_count as f64;
        // Per-cell weight on the carried t_d = delta psi_d((x-c)/delta):
        // w_c C_d delta^-d / delta.
        let coeff =
            normalization_const(d) * self.delta.powi(-(d as i32 + 1)) * 2f64.powi(d as i32) / k;
        let cells: Vec<SpikeCell> = self
            .centers
            .iter()
            .zip(&self.values)
            .map(|(c, &v)| SpikeCell {
                center: c.clone(),
                final_weight: coeff * v,
            })
            .collect();
        emit_merged_deep(d, self.delta, &cells, self.input_scale)
    }
}

/// 1-d Riemann approximant exactly as the spike expansion lists it:
/// `t_j = (2j-1)/k - 1`, weights `(w_j, -2 w_j, w_j)` with
/// `w_j = (2/k) f(t_j) delta^-2`, DAC biases `(-t_j - delta, -t_j,
/// -t_j + delta)`, over the input replicated `3k` times. No boundary rescale.
pub fn approx_1d(f: &TargetFn, delta: f64, k: usize) -> Result<NetworkSpec> {
    if k < 1 {
        return Err(DacError::Contract("k must be >= 1".into()));
    }
    let plan = ApproxPlan::build(f, 1, delta, k, false)?;
    plan.emit()
}

/// d-dimensional Riemann approximant with the boundary rescale.
pub fn approx_nd(f: &TargetFn, d: usize, delta: f64, mesh: usize) -> Result<NetworkSpec> {
    let plan = ApproxPlan::build(f, d, delta, mesh, true)?;
    plan.emit()
}

// ---------------------------------------------------------------------------
// Measurement
// ---------------------------------------------------------------------------

/// Uniform grid over `[-1,1]^d` with `grid` points per axis (endpoints
/// included).
pub fn grid_points(d: usize, grid: usize) -> Vec<Vec<f64>> {
    assert!(grid >= 2, "grid must be >= 2");
    let total = grid.pow(d as u32);
    let mut pts = Vec::with_capacity(total);
    let mut idx = vec![0usize; d];
    loop {
        pts.push(
            idx.iter()
                .map(|&i| -1.0 + 2.0 * i as f64 / (grid - 1) as f64)
                .collect(),
        );
        let mut axis = 0;
        loop {
            if axis == d {
                return pts;
            }
            idx[axis] += 1;
            if idx[axis] < grid {
                break;
            }
            idx[axis] = 0;
            axis += 1;
        }
    }
}

/// Batched network evaluation over a point list.
pub fn eval_on_points(net: &NetworkSpec, points: &[Vec<f64>]) -> Result<Vec<f64>> {
    let d = points.first().map_or(0, Vec::len);
    let chunks: Vec<&[Vec<f64>]> = points.chunks(2048).collect();
    let results: Vec<Result<Vec<f64>>> = chunks
        .par_iter()
        .map(|chunk| {
            let mut flat = Vec::with_capacity(chunk.len() * d);
            for p in *chunk {
                flat.extend_from_slice(p);
            }
            let batch = Tensor::new(vec![chunk.len(), d], flat)?;
            Ok(net.forward(&batch)?.into_data())
        })
        .collect();
    let mut out = Vec::with_capacity(points.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// `max |f - net|` over the uniform grid including endpoints.
pub fn sup_error(net: &NetworkSpec, f: &TargetFn, d: usize, grid: usize) -> Result<f64> {
    if grid < 2 {
        return Err(DacError::Contract("grid must be >= 2".into()));
    }
    let pts = grid_points(d, grid);
    let got = eval_on_points(net, &pts)?;
    Ok(pts
        .iter()
        .zip(&got)
        .map(|(p, &g)| (f(p) - g).abs())
        .fold(0.0, f64::max))
}

/// Default certification grid per axis (desk-scale budget).
pub fn default_grid(d: usize) -> usize {
    match d {
        1 => 1001,
        2 => 201,
        3 => 41,
        _ => 11,
    }
}

/// Default mesh cap per axis.
pub fn mesh_cap(d: usize) -> usize {
    match d {
        1 => 512,
        2 => 64,
        _ => 16,
    }
}

/// Modulus of continuity estimated on a probe grid: `omega(t)` is the largest
/// `|f(p) - f(q)|` over probe pairs with `|p - q|_inf <= t`.
pub struct ModulusEstimate {
    /// Pair distances (ascending) with running max of `|delta f|`.
    pairs: Vec<(f64, f64)>,
}

impl ModulusEstimate {
    pub fn probe(f: &TargetFn, d: usize) -> Self {
        let n = match d {
            1 => 129,
            2 => 25,
            _ => 9,
        };
        let pts = grid_points(d, n);
        let vals: Vec<f64> = pts.iter().map(|p| f(p)).collect();
        let mut pairs: Vec<(f64, f64)> = Vec::new();
        for i in 0..pts.len() {
            for j in (i + 1)..pts.len() {
                let dist = pts[i]
                    .iter()
                    .zip(&pts[j])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                pairs.push((dist, (vals[i] - vals[j]).abs()));
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut run = 0.0f64;
        for p in &mut pairs {
            run = run.max(p.1);
            p.1 = run;
        }
        ModulusEstimate { pairs }
    }

    pub fn omega(&self, t: f64) -> f64 {
        // largest recorded distance <= t
        let mut best = 0.0;
        for &(dist, m) in &self.pairs {
            if dist > t {
                break;
            }
            best = m;
        }
        best
    }

    /// Largest `delta` with `omega(delta * d) < bound`, over the probed
    /// distances; falls back to the finest probe spacing.
    pub fn pick_delta(&self, d: usize, bound: f64) -> f64 {
        let mut best: Option<f64> = None;
        for &(dist, m) in &self.pairs {
            if m < bound {
                best = Some(dist);
            } else {
                break;
            }
        }
        let dist = best.unwrap_or_else(|| self.pairs.first().map_or(1e-3, |p| p.0.max(1e-3)));
        (dist / d as f64).clamp(1e-4, 0.5)
    }
}

/// Searches for `(delta, mesh)` such that the emitted approximant certifies
/// `sup |f - g| < epsilon` on the default grid. Two phases, both
/// deterministic:
///
/// 1. `delta` from the estimated modulus of continuity
///    (`omega(delta * d) < epsilon / 2`), mesh doubling up to the cap;
/// 2. fallback sweep coupling `delta` to the cell size (`delta = beta * h`),
///    which covers targets whose modulus-derived `delta` needs a finer mesh
///    than the cap allows.
///
/// Fails with a diagnostic after the mesh cap.
pub fn select_params(f: &TargetFn, d: usize, epsilon: f64) -> Result<(f64, usize)> {
    if epsilon <= 0.0 {
        return Err(DacError::Contract(format!(
            "epsilon must be > 0, got {epsilon}"
        )));
    }
    let cap = mesh_cap(d);
    let grid = default_grid(d);
    let modulus = ModulusEstimate::probe(f, d);
    let delta_omega = modulus.pick_delta(d, epsilon / 2.0);

    let try_pair = |delta: f64, mesh: usize| -> Result<Option<f64>> {
        if delta <= 0.0 || delta >= 1.0 {
            return Ok(None);
        }
        let net = approx_nd(f, d, delta, mesh)?;
        let err = sup_error(&net, f, d, grid)?;
        Ok((err < epsilon).then_some(err))
    };

    // Phase 1: modulus-derived delta, doubling mesh.
    let mut mesh = 1;
    while mesh <= cap {
        // Spikes thinner than half a cell fall between the sample points;
        // skip straight to a finer mesh.
        if delta_omega >= 1.0 / mesh as f64 && try_pair(delta_omega, mesh)?.is_some() {
            return Ok((delta_omega, mesh));
        }
        mesh *= 2;
    }

    // Phase 2: cell-coupled deltas; within a mesh, keep the best certifier.
    let mut mesh = 1;
    while mesh <= cap {
        let h = 2.0 / mesh as f64;
        let mut best: Option<(f64, f64)> = None;
        for beta in [1.0, 1.5, 2.0, 3.0, 4.0, 6.0] {
            let delta = (beta * h).min(0.5);
            if let Some(err) = try_pair(delta, mesh)? {
                if best.is_none_or(|(_, e)| err < e) {
                    best = Some((delta, err));
                }
            }
        }
        if let Some((delta, _)) = best {
            return Ok((delta, mesh));
        }
        mesh *= 2;
    }

    Err(DacError::Unreachable(format!(
        "no (delta, mesh) within mesh cap {cap} certifies epsilon {epsilon} \
         (modulus-derived delta {delta_omega:.6})"
    )))
}

/// Midpoint-rule integral of the network over `[lo, hi]^d` with `steps` cells
/// per axis.
pub fn integrate_network(
    net: &NetworkSpec,
    d: usize,
    lo: f64,
    hi: f64,
    steps: usize,
) -> Result<f64> {
    let h = (hi - lo) / steps as f64;
    let total = steps.pow(d as u32);
    let mut idx = vec![0usize; d];
    let mut pts = Vec::with_capacity(total);
    loop {
        pts.push(
            idx.iter()
                .map(|&i| lo + (i as f64 + 0.5) * h)
                .collect::<Vec<f64>>(),
        );
        let mut axis = 0;
        loop {
            if axis == d {
                break;
            }
            idx[axis] += 1;
            if idx[axis] < steps {
                break;
            }
            idx[axis] = 0;
            axis += 1;
        }
        if axis == d {
            break;
        }
    }
    let vals = eval_on_points(net, &pts)?;
    Ok(vals.iter().sum::<f64>() * h.powi(d as i32))
}

/// Widths of the DAC layers of an emitted network (replicate layers are not
/// DAC layers).
pub fn dac_layer_widths(net: &NetworkSpec) -> Vec<usize> {
    net.layers
        .iter()
        .filter_map(|l| match l {
            LayerSpec::DenseDac(p) => Some(p.out_dim()),
            LayerSpec::DenseDacEdges(p) => Some(p.out_dim),
            _ => None,
        })
        .collect()
}

/// Max fan-in (incoming edge count) per DAC layer.
pub fn dac_layer_max_fan_in(net: &NetworkSpec) -> Vec<usize> {
    net.layers
        .iter()
        .filter_map(|l| match l {
            LayerSpec::DenseDac(p) => {
                let m = p.in_dim();
                let counts = (0..p.out_dim())
                    .map(|i| {
                        p.weights.data()[i * m..(i + 1) * m]
                            .iter()
                            .filter(|&&w| w != 0.0)
                            .count()
                    })
                    .max()
                    .unwrap_or(0);
                Some(counts)
            }
            LayerSpec::DenseDacEdges(p) => Some(p.fan_in().into_iter().max().unwrap_or(0)),
            _ => None,
        })
        .collect()
}

/// Plain-text certificate of an approximation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Certificate {
    pub dim: usize,
    pub delta: f64,
    pub mesh: usize,
    pub cell_count: usize,
    pub layer_widths: Vec<usize>,
    pub sup_error: f64,
    pub grid_points_per_axis: usize,
    pub epsilon: f64,
    pub passed: bool,
}

impl Certificate {
    pub fn render_text(&self) -> String {
        format!(
            "d = {}\ndelta = {:.6e}\nk = {}\nmesh = {}\nlayer_widths = {:?}\n\
             sup_error = {:.6e}\ngrid = {} points per axis on [-1,1]^{}\n\
             epsilon = {:.6e}\nresult = {}\n",
            self.dim,
            self.delta,
            self.cell_count,
            self.mesh,
            self.layer_widths,
            self.sup_error,
            self.grid_points_per_axis,
            self.dim,
            self.epsilon,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Named target functions for the CLI and bindings.
pub fn named_function(name: &str) -> Option<Box<TargetFn>> {
    match name {
        "sin_pi" => Some(Box::new(|x: &[f64]| (std::f64::consts::PI * x[0]).sin())),
        "product" => Some(Box::new(|x: &[f64]| x.iter().product())),
        "abs_sum" => Some(Box::new(|x: &[f64]| {
            x.iter().map(|v| v.abs()).sum::<f64>()
        })),
        "linear" => Some(Box::new(|x: &[f64]| x[0])),
        "constant" => Some(Box::new(|_: &[f64]| 1.0)),
        _ => None,
    }
}
