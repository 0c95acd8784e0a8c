//! Sparse step operator `T = T_a + T_c`, its unitarity audit, and the
//! environment composition `𝒯 = T_E^{1/2} T T_E^{1/2}`.
//!
//! Columns of `T`:
//!
//! - `c = 0`: the transition-table successor. A successor in an action fiber
//!   is dressed with the fiber's entry isometry `B` (a single `c = 1` entry
//!   when the kernel never dwells).
//! - `c = 1` in an action fiber: the unitarized kernel `A` of that fiber's `o`.
//! - `c = 1` elsewhere: identity.
//!
//! Entries below [`ENTRY_FLOOR`] are not stored. The environment step acts on
//! `y` alone and is kept as a dense `L × L` factor instead of being multiplied
//! into the sparse columns.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::action_kernel::{KernelKind, KernelSet, KernelSpec};
use crate::codec::*;
use crate::config_space::{Configuration, SystemParams};
use crate::task_machine::{is_action_fiber, TransitionTable};
use crate::{Error, Result, C64};

/// Kernel amplitudes below this magnitude are not stored in the operator.
pub const ENTRY_FLOOR: f64 = 1e-15;
/// Audits above this deviation fail.
pub const UNITARITY_TOLERANCE: f64 = 1e-10;

const OPERATOR_MAGIC: &[u8; 4] = b"QROP";
const OPERATOR_VERSION: u32 = 1;
const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// Column-compressed sparse matrix with `u32` row indices.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseColumns {
    dimension: usize,
    col_ptr: Vec<usize>,
    rows: Vec<u32>,
    vals: Vec<C64>,
}

impl SparseColumns {
    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn nonzeros(&self) -> usize {
        self.vals.len()
    }

    pub fn column(&self, j: usize) -> (&[u32], &[C64]) {
        let (a, b) = (self.col_ptr[j], self.col_ptr[j + 1]);
        (&self.rows[a..b], &self.vals[a..b])
    }

    pub fn column_entries(&self, j: usize) -> impl Iterator<Item = (usize, C64)> + '_ {
        let (r, v) = self.column(j);
        r.iter().map(|&r| r as usize).zip(v.iter().copied())
    }

    /// Row-major copy, used for gather-style products and the Gram audit.
    pub fn to_rows(&self) -> SparseRows {
        let n = self.dimension;
        let mut counts = vec![0usize; n + 1];
        for &r in &self.rows {
            counts[r as usize + 1] += 1;
        }
        for i in 0..n {
            counts[i + 1] += counts[i];
        }
        let mut next = counts.clone();
        let mut cols = vec![0u32; self.vals.len()];
        let mut vals = vec![ZERO; self.vals.len()];
        for j in 0..n {
            for k in self.col_ptr[j]..self.col_ptr[j + 1] {
                let r = self.rows[k] as usize;
                cols[next[r]] = j as u32;
                vals[next[r]] = self.vals[k];
                next[r] += 1;
            }
        }
        SparseRows { row_ptr: counts, cols, vals }
    }

    fn from_column_lists(dimension: usize, blocks: Vec<(Vec<usize>, Vec<u32>, Vec<C64>)>) -> Self {
        let nnz = blocks.iter().map(|b| b.1.len()).sum();
        let mut col_ptr = Vec::with_capacity(dimension + 1);
        let mut rows = Vec::with_capacity(nnz);
        let mut vals = Vec::with_capacity(nnz);
        col_ptr.push(0);
        for (lens, r, v) in blocks {
            for len in lens {
                let last = *col_ptr.last().unwrap();
                col_ptr.push(last + len);
            }
            rows.extend(r);
            vals.extend(v);
        }
        Self { dimension, col_ptr, rows, vals }
    }
}

/// Row-compressed counterpart of [`SparseColumns`].
#[derive(Clone, Debug)]
pub struct SparseRows {
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<C64>,
}

impl SparseRows {
    pub fn row(&self, r: usize) -> (&[u32], &[C64]) {
        let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
        (&self.cols[a..b], &self.vals[a..b])
    }

    /// `out = M · input`; each output entry is summed in column order, so the
    /// result does not depend on the thread count.
    pub fn matvec(&self, input: &[C64], out: &mut [C64]) {
        out.par_chunks_mut(4096).enumerate().for_each(|(chunk, block)| {
            let base = chunk * 4096;
            for (k, o) in block.iter_mut().enumerate() {
                let (cols, vals) = self.row(base + k);
                let mut acc = ZERO;
                for (&c, &v) in cols.iter().zip(vals) {
                    acc += v * input[c as usize];
                }
                *o = acc;
            }
        });
    }
}

/// Environment dynamics acting on the particle site `y`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EnvironmentSpec {
    /// Motionless particle, `T_E = 1`.
    None,
    /// Nearest-neighbour hopping `H_E` with amplitude `gamma`, step `delta`.
    Hopping { gamma: f64, delta: f64 },
}

impl EnvironmentSpec {
    pub fn validate(&self) -> Result<()> {
        if let EnvironmentSpec::Hopping { gamma, delta } = *self {
            if !gamma.is_finite() {
                return Err(Error::InvalidParams(format!("hopping amplitude {gamma} is not finite")));
            }
            if !(delta > 0.0) || !delta.is_finite() {
                return Err(Error::InvalidParams(format!("time step {delta} must be positive")));
            }
        }
        Ok(())
    }

    pub fn is_motionless(&self) -> bool {
        match *self {
            EnvironmentSpec::None => true,
            EnvironmentSpec::Hopping { gamma, .. } => gamma == 0.0,
        }
    }
}

/// Dense `L × L` unitary `exp(−i τ H_E)` on the particle register.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvironmentStep {
    spec: EnvironmentSpec,
    lattice: usize,
    /// Fraction of `delta` this step covers (1 for `T_E`, ½ for `T_E^{1/2}`).
    fraction: f64,
    matrix: Vec<C64>,
}

impl EnvironmentStep {
    fn new(spec: EnvironmentSpec, lattice: usize, fraction: f64) -> Self {
        let l = lattice;
        let mut matrix = vec![ZERO; l * l];
        match spec {
            EnvironmentSpec::None => {
                for y in 0..l {
                    matrix[y * l + y] = C64::new(1.0, 0.0);
                }
            }
            EnvironmentSpec::Hopping { gamma, delta } => {
                let tau = delta * fraction;
                let phase: Vec<C64> = (0..l)
                    .map(|m| {
                        let energy = 2.0 * gamma * (2.0 * PI * m as f64 / l as f64).cos();
                        C64::from_polar(1.0, -tau * energy)
                    })
                    .collect();
                for yp in 0..l {
                    for y in 0..l {
                        let shift = (yp + l - y) % l;
                        let sum: C64 = (0..l)
                            .map(|m| {
                                let k = 2.0 * PI * ((m * shift) % l) as f64 / l as f64;
                                phase[m] * C64::from_polar(1.0, k)
                            })
                            .sum();
                        matrix[yp * l + y] = sum / l as f64;
                    }
                }
            }
        }
        Self { spec, lattice, fraction, matrix }
    }

    pub fn spec(&self) -> EnvironmentSpec {
        self.spec
    }

    pub fn lattice(&self) -> usize {
        self.lattice
    }

    /// `⟨y′| step |y⟩`.
    pub fn element(&self, yp: usize, y: usize) -> C64 {
        self.matrix[yp * self.lattice + y]
    }

    /// Same generator over half the time step.
    pub fn half(&self) -> EnvironmentStep {
        Self::new(self.spec, self.lattice, self.fraction / 2.0)
    }

    pub fn product(&self, other: &EnvironmentStep) -> Vec<C64> {
        let l = self.lattice;
        let mut out = vec![ZERO; l * l];
        for i in 0..l {
            for j in 0..l {
                out[i * l + j] = (0..l).map(|k| self.element(i, k) * other.element(k, j)).sum();
            }
        }
        out
    }

    /// `(max |(U†U − I)_{ij}|, max row sum of |U†U − I|)`.
    pub fn unitarity_deviation(&self) -> (f64, f64) {
        let l = self.lattice;
        let mut worst: f64 = 0.0;
        let mut row_sum: f64 = 0.0;
        for i in 0..l {
            let mut sum = 0.0;
            for j in 0..l {
                let g: C64 = (0..l).map(|k| self.element(k, i).conj() * self.element(k, j)).sum();
                let dev = (g - if i == j { 1.0 } else { 0.0 }).norm();
                worst = worst.max(dev);
                sum += dev;
            }
            row_sum = row_sum.max(sum);
        }
        (worst, row_sum)
    }

    /// Applies the step to a dense state whose `y` blocks have length `stride`.
    pub fn apply_dense(&self, input: &[C64], out: &mut [C64], stride: usize) {
        let l = self.lattice;
        out.par_chunks_mut(stride).enumerate().for_each(|(yp, block)| {
            block.fill(ZERO);
            for y in 0..l {
                let e = self.element(yp, y);
                if e == ZERO {
                    continue;
                }
                let src = &input[y * stride..(y + 1) * stride];
                for (o, s) in block.iter_mut().zip(src) {
                    *o += e * s;
                }
            }
        });
    }
}

/// Builds `T_E = exp(−iΔH_E)` by Fourier diagonalization.
pub fn build_environment_step(env: &EnvironmentSpec, params: &SystemParams) -> Result<EnvironmentStep> {
    env.validate()?;
    Ok(EnvironmentStep::new(*env, params.lattice(), 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuditMethod {
    /// Exact column Gram of the stored sparse matrix.
    ColumnGram,
    /// Norm bound for `T_E^{1/2} T T_E^{1/2}` from the factors' exact Grams.
    FactorBound,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuditRecord {
    pub method: AuditMethod,
    /// Upper bound on `max |(T†T − I)_{ij}|` (exact for [`AuditMethod::ColumnGram`]).
    pub deviation: f64,
    /// Location of the largest entry of the core operator's Gram deviation.
    pub worst: (usize, usize),
    /// Largest absolute row sum of the core operator's `T†T − I`.
    pub row_sum_bound: f64,
}

/// Step operator with audit metadata and optional environment factor.
#[derive(Clone, Debug)]
pub struct StepOperator {
    params: SystemParams,
    kernel: Option<KernelSpec>,
    environment: EnvironmentSpec,
    core: SparseColumns,
    half_env: Option<EnvironmentStep>,
    audit: Option<AuditRecord>,
    rows: OnceLock<SparseRows>,
}

impl PartialEq for StepOperator {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
            && self.kernel == other.kernel
            && self.environment == other.environment
            && self.core == other.core
            && self.audit == other.audit
    }
}

impl StepOperator {
    pub fn params(&self) -> &SystemParams {
        &self.params
    }

    pub fn dimension(&self) -> usize {
        self.params.dimension()
    }

    pub fn kernel(&self) -> Option<&KernelSpec> {
        self.kernel.as_ref()
    }

    pub fn environment(&self) -> EnvironmentSpec {
        self.environment
    }

    /// The sparse `T` without the environment factors.
    pub fn core(&self) -> &SparseColumns {
        &self.core
    }

    pub fn half_environment(&self) -> Option<&EnvironmentStep> {
        self.half_env.as_ref()
    }

    pub fn audit(&self) -> Option<&AuditRecord> {
        self.audit.as_ref()
    }

    pub fn nonzeros(&self) -> usize {
        self.core.nonzeros()
    }

    pub fn is_motionless(&self) -> bool {
        self.half_env.is_none()
    }

    pub fn build_hash(&self) -> [u8; 32] {
        build_hash(&self.params, self.kernel.as_ref(), &self.environment)
    }

    fn core_rows(&self) -> &SparseRows {
        self.rows.get_or_init(|| self.core.to_rows())
    }

    /// `out = 𝒯 · input` on dense amplitude vectors.
    pub fn apply(&self, input: &[C64], out: &mut [C64]) {
        match &self.half_env {
            None => self.core_rows().matvec(input, out),
            Some(e) => {
                let stride = self.params.y_stride();
                let mut tmp = vec![ZERO; input.len()];
                e.apply_dense(input, &mut tmp, stride);
                self.core_rows().matvec(&tmp, out);
                tmp.copy_from_slice(out);
                e.apply_dense(&tmp, out, stride);
            }
        }
    }

    /// `𝒯 · v` on a sparse vector given as sorted `(index, amplitude)` pairs.
    pub fn apply_sparse(&self, v: &[(usize, C64)]) -> Vec<(usize, C64)> {
        let v = match &self.half_env {
            None => v.to_vec(),
            Some(e) => self.env_sparse(e, v),
        };
        let mut acc: Vec<(usize, C64)> = Vec::new();
        for &(j, a) in &v {
            acc.extend(self.core.column_entries(j).map(|(r, t)| (r, t * a)));
        }
        let out = merge(acc);
        match &self.half_env {
            None => out,
            Some(e) => self.env_sparse(e, &out),
        }
    }

    fn env_sparse(&self, e: &EnvironmentStep, v: &[(usize, C64)]) -> Vec<(usize, C64)> {
        let stride = self.params.y_stride();
        let l = self.params.lattice();
        let mut acc = Vec::with_capacity(v.len() * l);
        for &(i, a) in v {
            let (y, r) = (i / stride, i % stride);
            for yp in 0..l {
                let m = e.element(yp, y);
                if m != ZERO {
                    acc.push((yp * stride + r, m * a));
                }
            }
        }
        merge(acc)
    }

    /// Explicit sparse matrix of `𝒯`, including environment factors.
    pub fn materialize(&self) -> SparseColumns {
        if self.half_env.is_none() {
            return self.core.clone();
        }
        let n = self.dimension();
        let mut lens = Vec::with_capacity(n);
        let mut rows = Vec::new();
        let mut vals = Vec::new();
        for j in 0..n {
            let col = self.apply_sparse(&[(j, C64::new(1.0, 0.0))]);
            lens.push(col.len());
            for (r, v) in col {
                rows.push(r as u32);
                vals.push(v);
            }
        }
        SparseColumns::from_column_lists(n, vec![(lens, rows, vals)])
    }
}

/// Sorts by index and sums duplicates, dropping exact zeros.
pub(crate) fn merge(mut acc: Vec<(usize, C64)>) -> Vec<(usize, C64)> {
    acc.sort_by_key(|e| e.0);
    let mut out: Vec<(usize, C64)> = Vec::with_capacity(acc.len());
    for (i, a) in acc {
        match out.last_mut() {
            Some(last) if last.0 == i => last.1 += a,
            _ => out.push((i, a)),
        }
    }
    out.retain(|e| e.1 != ZERO);
    out
}

/// Fingerprint of everything that determines the operator.
pub fn build_hash(params: &SystemParams, kernel: Option<&KernelSpec>, env: &EnvironmentSpec) -> [u8; 32] {
    let mut buf = Vec::new();
    buf.extend_from_slice(b"qrobot-operator-v1");
    write_build_fields(&mut buf, params, kernel, env).expect("writing to a Vec cannot fail");
    let digest = Sha256::digest(&buf);
    let mut out = [0u8; 32];
    out.copy_from_slice(&digest);
    out
}

pub fn hash_hex(hash: &[u8; 32]) -> String {
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_build_fields(
    w: &mut impl Write,
    params: &SystemParams,
    kernel: Option<&KernelSpec>,
    env: &EnvironmentSpec,
) -> Result<()> {
    put_u32(w, params.lattice() as u32)?;
    put_u32(w, params.memory_bits())?;
    match kernel {
        Some(k) => {
            let (kind, alpha) = match k.kind {
                KernelKind::Strict => (0u8, 0.0),
                KernelKind::Gaussian { alpha } => (1u8, alpha),
            };
            put_u8(w, kind)?;
            put_f64(w, alpha)?;
            put_c64(w, k.a0)?;
            put_c64(w, k.a1)?;
        }
        None => {
            put_u8(w, 255)?;
            for _ in 0..5 {
                put_f64(w, 0.0)?;
            }
        }
    }
    let (kind, gamma, delta) = match *env {
        EnvironmentSpec::None => (0u8, 0.0, 0.0),
        EnvironmentSpec::Hopping { gamma, delta } => (1u8, gamma, delta),
    };
    put_u8(w, kind)?;
    put_f64(w, gamma)?;
    put_f64(w, delta)
}

/// Assembles `T` from the compiled table and unitarized kernels.
pub fn assemble_step_operator(table: &TransitionTable, kernels: &KernelSet) -> Result<StepOperator> {
    let p = *table.params();
    let l = p.lattice();
    let n_int = p.internal_count();
    for i in 0..n_int {
        let st = p.internal_state(i);
        if is_action_fiber(st.node, st.o) && kernels.get(st.o).is_none() {
            return Err(Error::MissingKernel(st.o.name()));
        }
    }
    if p.dimension() > u32::MAX as usize {
        return Err(Error::DimensionOverflow);
    }
    let kernel_entries = |o, entry: bool| -> Vec<(usize, u8, C64)> {
        let k = kernels.get(o).expect("checked above");
        (0..2u8)
            .flat_map(|c| (0..l).map(move |u| (u, c)))
            .map(|(u, c)| {
                let v = if entry { k.entry_values(c)[u] } else { k.action_values(c)[u] };
                (u, c, v)
            })
            .filter(|e| e.2.norm() >= ENTRY_FLOOR)
            .collect()
    };
    // Per-symbol entry lists, indexed by output index.
    let action: Vec<Vec<(usize, u8, C64)>> = crate::config_space::Output::ALL
        .iter()
        .map(|&o| if kernels.get(o).is_some() { kernel_entries(o, false) } else { Vec::new() })
        .collect();
    let entry: Vec<Vec<(usize, u8, C64)>> = crate::config_space::Output::ALL
        .iter()
        .map(|&o| if kernels.get(o).is_some() { kernel_entries(o, true) } else { Vec::new() })
        .collect();
    let fiber: Vec<bool> = (0..n_int)
        .map(|i| {
            let st = p.internal_state(i);
            is_action_fiber(st.node, st.o)
        })
        .collect();

    let blocks: Vec<(Vec<usize>, Vec<u32>, Vec<C64>)> = (0..l)
        .into_par_iter()
        .map(|y| {
            let mut lens = Vec::with_capacity(l * n_int * 2);
            let mut rows = Vec::new();
            let mut vals = Vec::new();
            let mut col: Vec<(u32, C64)> = Vec::with_capacity(4 * l);
            for x in 0..l {
                for i in 0..n_int {
                    for c in 0..2u8 {
                        col.clear();
                        let (target, list) = if c == 0 {
                            let succ = table.successor(x == y, i);
                            let o = p.internal_state(succ.internal).o.index();
                            if succ.c == 1 && fiber[succ.internal] {
                                (succ.internal, Some(&entry[o]))
                            } else {
                                col.push((p.pack(y, x, succ.internal, succ.c) as u32, C64::new(1.0, 0.0)));
                                (succ.internal, None)
                            }
                        } else if fiber[i] {
                            (i, Some(&action[p.internal_state(i).o.index()]))
                        } else {
                            col.push((p.pack(y, x, i, 1) as u32, C64::new(1.0, 0.0)));
                            (i, None)
                        };
                        if let Some(list) = list {
                            for &(u, cp, v) in list {
                                col.push((p.pack(y, (x + u) % l, target, cp) as u32, v));
                            }
                            col.sort_by_key(|e| e.0);
                        }
                        lens.push(col.len());
                        for &(r, v) in &col {
                            rows.push(r);
                            vals.push(v);
                        }
                    }
                }
            }
            (lens, rows, vals)
        })
        .collect();

    Ok(StepOperator {
        params: p,
        kernel: kernels.spec().copied(),
        environment: EnvironmentSpec::None,
        core: SparseColumns::from_column_lists(p.dimension(), blocks),
        half_env: None,
        audit: None,
        rows: OnceLock::new(),
    })
}

/// Compiles the task, builds kernels, assembles and audits `T`.
pub fn build_step_operator(params: SystemParams, kernel: &KernelSpec) -> Result<StepOperator> {
    let table = crate::task_machine::compile_task(params);
    let kernels = KernelSet::build(kernel, params.lattice())?;
    let mut op = assemble_step_operator(&table, &kernels)?;
    audit_unitarity(&mut op)?;
    Ok(op)
}

struct GramSummary {
    deviation: f64,
    worst: (usize, usize),
    row_sum: f64,
}

fn column_gram(m: &SparseColumns, rows: &SparseRows) -> GramSummary {
    let n = m.dimension();
    let chunk = 8192;
    let partial: Vec<GramSummary> = (0..n.div_ceil(chunk))
        .into_par_iter()
        .map(|b| {
            let mut best = GramSummary { deviation: 0.0, worst: (0, 0), row_sum: 0.0 };
            let mut acc: Vec<(usize, C64)> = Vec::new();
            for j in b * chunk..((b + 1) * chunk).min(n) {
                acc.clear();
                for (r, t) in m.column_entries(j) {
                    let (cols, vals) = rows.row(r);
                    for (&i, &v) in cols.iter().zip(vals) {
                        acc.push((i as usize, v.conj() * t));
                    }
                }
                acc.sort_by_key(|e| e.0);
                let mut sum = 0.0;
                let mut seen_diag = false;
                let mut k = 0;
                while k < acc.len() {
                    let i = acc[k].0;
                    let mut g = ZERO;
                    while k < acc.len() && acc[k].0 == i {
                        g += acc[k].1;
                        k += 1;
                    }
                    if i == j {
                        seen_diag = true;
                        g -= 1.0;
                    }
                    let dev = g.norm();
                    sum += dev;
                    if dev > best.deviation {
                        best.deviation = dev;
                        best.worst = (i, j);
                    }
                }
                if !seen_diag {
                    sum += 1.0;
                    if 1.0 > best.deviation {
                        best.deviation = 1.0;
                        best.worst = (j, j);
                    }
                }
                best.row_sum = best.row_sum.max(sum);
            }
            best
        })
        .collect();
    partial.into_iter().fold(
        GramSummary { deviation: 0.0, worst: (0, 0), row_sum: 0.0 },
        |a, b| GramSummary {
            deviation: a.deviation.max(b.deviation),
            worst: if b.deviation > a.deviation { b.worst } else { a.worst },
            row_sum: a.row_sum.max(b.row_sum),
        },
    )
}

/// Exact column-Gram deviation `max |(M†M − I)_{ij}|` of a sparse matrix.
pub fn gram_deviation(m: &SparseColumns) -> f64 {
    column_gram(m, &m.to_rows()).deviation
}

/// Certifies unitarity and records the result in the operator.
///
/// Without an environment factor the column Gram is computed exactly. With
/// one, `‖𝒯†𝒯 − I‖₂` is bounded from the exact Gram row sums of `T` (τ) and
/// of `T_E^{1/2}` (η) by `(1+η)τ + η + (1+η)(1+τ)η`, which bounds every entry.
pub fn audit_unitarity(op: &mut StepOperator) -> Result<f64> {
    let gram = column_gram(&op.core, op.core_rows());
    let record = match &op.half_env {
        None => AuditRecord {
            method: AuditMethod::ColumnGram,
            deviation: gram.deviation,
            worst: gram.worst,
            row_sum_bound: gram.row_sum,
        },
        Some(e) => {
            let (_, eta) = e.unitarity_deviation();
            let tau = gram.row_sum;
            AuditRecord {
                method: AuditMethod::FactorBound,
                deviation: (1.0 + eta) * tau + eta + (1.0 + eta) * (1.0 + tau) * eta,
                worst: gram.worst,
                row_sum_bound: gram.row_sum,
            }
        }
    };
    op.audit = Some(record);
    if record.deviation > UNITARITY_TOLERANCE {
        return Err(Error::AuditFailure {
            deviation: record.deviation,
            row: record.worst.0,
            col: record.worst.1,
        });
    }
    Ok(record.deviation)
}

/// Returns `T_E^{1/2} T T_E^{1/2}` and reruns the audit.
pub fn compose_environment(op: &StepOperator, env: &EnvironmentStep) -> Result<StepOperator> {
    if env.lattice() != op.params.lattice() {
        return Err(Error::DimensionMismatch { expected: op.params.lattice(), found: env.lattice() });
    }
    if op.half_env.is_some() {
        return Err(Error::InvalidParams("operator already carries an environment".into()));
    }
    if env.spec() == EnvironmentSpec::None {
        return Ok(op.clone());
    }
    let mut out = StepOperator {
        params: op.params,
        kernel: op.kernel,
        environment: env.spec(),
        core: op.core.clone(),
        half_env: Some(env.half()),
        audit: None,
        rows: OnceLock::new(),
    };
    audit_unitarity(&mut out)?;
    Ok(out)
}

/// Structural checks on the `T_c` and `T_a` blocks.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BlockReport {
    /// `c = 0` columns with an entry at a different robot site.
    pub computation_moves_robot: usize,
    /// Entries of any column that change `y`.
    pub changes_particle: usize,
    /// `c = 1` entries that change `(node, o, d, s)`.
    pub action_changes_registers: usize,
    /// `c = 0` columns that are not a single unit entry.
    pub computation_not_unit: usize,
    /// Rows receiving more than one `c = 0` column.
    pub computation_rows_shared: usize,
}

/// Checks the block structure of the sparse core exhaustively.
pub fn block_report(op: &StepOperator) -> BlockReport {
    let p = op.params;
    let mut rep = BlockReport::default();
    let mut hits = vec![0u8; p.dimension()];
    for j in 0..p.dimension() {
        let (yj, xj, ij, cj) = p.unpack(j);
        let entries: Vec<(usize, C64)> = op.core.column_entries(j).collect();
        if cj == 0 && !(entries.len() == 1 && (entries[0].1.norm() - 1.0).abs() < 1e-12) {
            rep.computation_not_unit += 1;
        }
        let mut moved = false;
        for &(r, _) in &entries {
            let (yr, xr, ir, _) = p.unpack(r);
            if yr != yj {
                rep.changes_particle += 1;
            }
            if cj == 0 {
                moved |= xr != xj;
                hits[r] = hits[r].saturating_add(1);
            } else if ir != ij {
                rep.action_changes_registers += 1;
            }
        }
        rep.computation_moves_robot += moved as usize;
    }
    rep.computation_rows_shared = hits.iter().filter(|&&h| h > 1).count();
    rep
}

fn kernel_from_fields(kind: u8, alpha: f64, a0: C64, a1: C64) -> Result<Option<KernelSpec>> {
    match kind {
        0 => Ok(Some(KernelSpec { kind: KernelKind::Strict, a0, a1 })),
        1 => Ok(Some(KernelSpec { kind: KernelKind::Gaussian { alpha }, a0, a1 })),
        255 => Ok(None),
        k => Err(Error::Format(format!("unknown kernel kind {k}"))),
    }
}

/// Writes the portable operator file.
pub fn write_operator(op: &StepOperator, w: &mut impl Write) -> Result<()> {
    w.write_all(OPERATOR_MAGIC)?;
    put_u32(w, OPERATOR_VERSION)?;
    w.write_all(&op.build_hash())?;
    write_build_fields(w, &op.params, op.kernel.as_ref(), &op.environment)?;
    let (method, deviation) = match op.audit {
        None => (0u8, f64::NAN),
        Some(a) => (if a.method == AuditMethod::ColumnGram { 1 } else { 2 }, a.deviation),
    };
    put_u8(w, method)?;
    put_f64(w, deviation)?;
    put_u64(w, op.core.dimension as u64)?;
    put_u64(w, op.core.nonzeros() as u64)?;
    for &c in &op.core.col_ptr {
        put_u64(w, c as u64)?;
    }
    for &r in &op.core.rows {
        put_u32(w, r)?;
    }
    for &v in &op.core.vals {
        put_c64(w, v)?;
    }
    Ok(())
}

pub fn save_operator(op: &StepOperator, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_operator(op, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Reads an operator file. The stored audit is kept; call
/// [`audit_unitarity`] to recompute it.
pub fn read_operator(r: &mut impl Read) -> Result<StepOperator> {
    expect_magic(r, OPERATOR_MAGIC)?;
    let version = get_u32(r)?;
    if version != OPERATOR_VERSION {
        return Err(Error::Format(format!("unsupported operator version {version}")));
    }
    let stored_hash: [u8; 32] = get_bytes(r)?;
    let params = SystemParams::new(get_u32(r)? as usize, get_u32(r)?)?;
    let kind = get_u8(r)?;
    let alpha = get_f64(r)?;
    let a0 = get_c64(r)?;
    let a1 = get_c64(r)?;
    let kernel = kernel_from_fields(kind, alpha, a0, a1)?;
    let env_kind = get_u8(r)?;
    let gamma = get_f64(r)?;
    let delta = get_f64(r)?;
    let environment = match env_kind {
        0 => EnvironmentSpec::None,
        1 => EnvironmentSpec::Hopping { gamma, delta },
        k => return Err(Error::Format(format!("unknown environment kind {k}"))),
    };
    environment.validate()?;
    let method = get_u8(r)?;
    let deviation = get_f64(r)?;
    let dimension = get_u64(r)? as usize;
    if dimension != params.dimension() {
        return Err(Error::DimensionMismatch { expected: params.dimension(), found: dimension });
    }
    let nnz = get_u64(r)? as usize;
    let mut col_ptr = Vec::with_capacity(dimension + 1);
    for _ in 0..=dimension {
        col_ptr.push(get_u64(r)? as usize);
    }
    if col_ptr[0] != 0 || col_ptr[dimension] != nnz || col_ptr.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Format("inconsistent column pointers".into()));
    }
    let mut rows = Vec::with_capacity(nnz);
    for _ in 0..nnz {
        let row = get_u32(r)?;
        if row as usize >= dimension {
            return Err(Error::Format(format!("row index {row} out of range")));
        }
        rows.push(row);
    }
    let mut vals = Vec::with_capacity(nnz);
    for _ in 0..nnz {
        vals.push(get_c64(r)?);
    }
    let audit = match method {
        0 => None,
        1 | 2 => {
            let method = if method == 1 { AuditMethod::ColumnGram } else { AuditMethod::FactorBound };
            Some(AuditRecord { method, deviation, worst: (0, 0), row_sum_bound: f64::NAN })
        }
        m => return Err(Error::Format(format!("unknown audit method {m}"))),
    };
    let half_env = match environment {
        EnvironmentSpec::None => None,
        spec => Some(EnvironmentStep::new(spec, params.lattice(), 0.5)),
    };
    let op = StepOperator {
        params,
        kernel,
        environment,
        core: SparseColumns { dimension, col_ptr, rows, vals },
        half_env,
        audit,
        rows: OnceLock::new(),
    };
    if op.build_hash() != stored_hash {
        return Err(Error::Format("build hash does not match header fields".into()));
    }
    Ok(op)
}

pub fn load_operator(path: &Path) -> Result<StepOperator> {
    read_operator(&mut BufReader::new(File::open(path)?))
}

/// Basis index of the task start with robot at `x` and particle at `y`.
pub fn start_index(params: &SystemParams, y: usize, x: usize) -> Result<usize> {
    params.encode(&Configuration::start(y, x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config_space::{Node, Output};
    use crate::task_machine::compile_task;

    fn strict(l: usize, n: u32) -> StepOperator {
        build_step_operator(SystemParams::new(l, n).unwrap(), &KernelSpec::strict()).unwrap()
    }

    #[test]
    fn strict_search_column() {
        let op = strict(8, 3);
        let p = op.params;
        let cfg = Configuration { y: 5, x: 2, d: 1, s: 0, node: Node::S0, o: Output::Mr1, c: 1 };
        let col: Vec<_> = op.core.column_entries(p.encode(&cfg).unwrap()).collect();
        let expect = Configuration { x: 3, c: 0, ..cfg };
        assert_eq!(col, vec![(p.encode(&expect).unwrap(), C64::new(1.0, 0.0))]);
        assert!(op.audit().unwrap().deviation <= 1e-12);
    }

    #[test]
    fn strict_blocks_are_permutations() {
        let op = strict(4, 2);
        let rep = block_report(&op);
        assert_eq!(rep, BlockReport::default());
    }

    #[test]
    fn gaussian_column_support_before_floor() {
        let p = SystemParams::new(8, 3).unwrap();
        let kernels = KernelSet::build(&KernelSpec::gaussian(1.0), 8).unwrap();
        let k = kernels.get(Output::Mr1).unwrap();
        assert_eq!(k.nonzeros(), 16);
        let op = assemble_step_operator(&compile_task(p), &kernels).unwrap();
        let cfg = Configuration { y: 5, x: 2, d: 1, s: 0, node: Node::S0, o: Output::Mr1, c: 1 };
        let stored = op.core.column(p.encode(&cfg).unwrap()).0.len();
        let above_floor = (0..2u8)
            .flat_map(|c| k.action_values(c).iter())
            .filter(|v| v.norm() >= ENTRY_FLOOR)
            .count();
        assert_eq!(stored, above_floor);
    }

    #[test]
    fn missing_kernel_is_an_error() {
        let p = SystemParams::new(4, 1).unwrap();
        let full = KernelSet::build(&KernelSpec::strict(), 4).unwrap();
        let mut partial = KernelSet::new();
        partial.insert(Output::Mr1, full.get(Output::Mr1).unwrap().clone());
        assert!(matches!(
            assemble_step_operator(&compile_task(p), &partial),
            Err(Error::MissingKernel(_))
        ));
    }

    #[test]
    fn raw_gaussian_fails_audit() {
        use crate::action_kernel::{gaussian_kernel, ActionColumnMap};
        let p = SystemParams::new(4, 1).unwrap();
        let spec = KernelSpec::gaussian(1.0);
        let mut set = KernelSet::new();
        for o in Output::ALL {
            set.insert(o, ActionColumnMap::from_raw_unchecked(&gaussian_kernel(o, &spec, 4).unwrap()));
        }
        let mut op = assemble_step_operator(&compile_task(p), &set).unwrap();
        assert!(matches!(audit_unitarity(&mut op), Err(Error::AuditFailure { .. })));
        assert!(op.audit().unwrap().deviation > 1e-3);
    }

    #[test]
    fn environment_identity_cases() {
        let p = SystemParams::new(8, 1).unwrap();
        let none = build_environment_step(&EnvironmentSpec::None, &p).unwrap();
        let still = build_environment_step(&EnvironmentSpec::Hopping { gamma: 0.0, delta: 1.0 }, &p).unwrap();
        for y in 0..8 {
            for yp in 0..8 {
                let id = if y == yp { 1.0 } else { 0.0 };
                assert_eq!(none.element(yp, y), C64::new(id, 0.0));
                assert!((still.element(yp, y) - id).norm() < 1e-15);
            }
        }
        assert!(build_environment_step(&EnvironmentSpec::Hopping { gamma: 0.1, delta: 0.0 }, &p).is_err());
    }

    #[test]
    fn environment_stay_amplitude() {
        let p = SystemParams::new(8, 1).unwrap();
        let (gamma, delta) = (0.1, 1.0);
        let e = build_environment_step(&EnvironmentSpec::Hopping { gamma, delta }, &p).unwrap();
        let oracle: C64 = (0..8)
            .map(|m| C64::from_polar(1.0, -delta * 2.0 * gamma * (2.0 * PI * m as f64 / 8.0).cos()))
            .sum::<C64>()
            / 8.0;
        assert!((e.element(0, 0) - oracle).norm() < 1e-15);
        assert!(e.unitarity_deviation().0 <= 1e-12);
        let half = e.half();
        let sq = half.product(&half);
        for i in 0..64 {
            assert!((sq[i] - e.matrix[i]).norm() <= 1e-12);
        }
    }

    #[test]
    fn composition_with_identity_is_exact() {
        let op = strict(4, 1);
        let e = build_environment_step(&EnvironmentSpec::None, op.params()).unwrap();
        let composed = compose_environment(&op, &e).unwrap();
        assert_eq!(composed, op);
    }

    #[test]
    fn composed_bound_covers_exact_gram() {
        let op = build_step_operator(SystemParams::new(4, 1).unwrap(), &KernelSpec::gaussian(1.0)).unwrap();
        let e = build_environment_step(&EnvironmentSpec::Hopping { gamma: 0.3, delta: 1.0 }, op.params()).unwrap();
        let composed = compose_environment(&op, &e).unwrap();
        let bound = composed.audit().unwrap().deviation;
        let exact = gram_deviation(&composed.materialize());
        assert!(exact <= bound, "exact {exact} bound {bound}");
        assert!(bound <= 1e-10);
    }

    #[test]
    fn sparse_and_dense_application_agree() {
        let op = build_step_operator(SystemParams::new(4, 1).unwrap(), &KernelSpec::gaussian(2.0)).unwrap();
        let e = build_environment_step(&EnvironmentSpec::Hopping { gamma: 0.2, delta: 0.5 }, op.params()).unwrap();
        let composed = compose_environment(&op, &e).unwrap();
        let n = composed.dimension();
        let j = start_index(composed.params(), 1, 2).unwrap();
        let mut dense = vec![ZERO; n];
        dense[j] = C64::new(1.0, 0.0);
        let mut out = vec![ZERO; n];
        composed.apply(&dense, &mut out);
        let sparse = composed.apply_sparse(&[(j, C64::new(1.0, 0.0))]);
        let mut max: f64 = 0.0;
        for (i, v) in sparse {
            max = max.max((out[i] - v).norm());
            out[i] = ZERO;
        }
        let rest: f64 = out.iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert!(max < 1e-15 && rest < 1e-15);
    }

    #[test]
    fn operator_file_roundtrip() {
        let op = build_step_operator(SystemParams::new(4, 1).unwrap(), &KernelSpec::gaussian(4.0)).unwrap();
        let e = build_environment_step(&EnvironmentSpec::Hopping { gamma: 0.05, delta: 1.0 }, op.params()).unwrap();
        let composed = compose_environment(&op, &e).unwrap();
        let mut buf = Vec::new();
        write_operator(&composed, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"QROP");
        let back = read_operator(&mut buf.as_slice()).unwrap();
        assert_eq!(back.core(), composed.core());
        assert_eq!(back.environment(), composed.environment());
        assert_eq!(back.half_environment(), composed.half_environment());
        assert_eq!(back.audit().unwrap().deviation, composed.audit().unwrap().deviation);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_operator(&mut bad.as_slice()).is_err());
        assert!(read_operator(&mut &buf[..buf.len() - 3]).is_err());
    }
}
