//! Action-phase kernels and their momentum-space unitarization.
//!
//! A kernel maps a robot at site `x` with `c = 1` to amplitudes
//! `g(r, c′)` on `(x + r, c′)`. `c′ = 0` ends the action phase, `c′ = 1`
//! dwells in it. Kernels are translation invariant on the periodic lattice and
//! stored by offset `r mod L`.
//!
//! [`unitarize`] takes the symbol `v(k) = (ĝ₀(k), ĝ₁(k))`, normalizes it at
//! every momentum and transforms back, giving an exact isometry `A`. It also
//! builds the complementary isometry `B` with symbol
//! `(−v̄₁ v₀/|v₀|, |v₀|)`, so `[A | B]` is unitary on the `(x, c)` fiber.
//! `B` is the dressing applied to computation steps that hand over to this
//! action; for a kernel without dwell it is the identity on `c = 1`.

use std::f64::consts::PI;

use crate::config_space::Output;
use crate::{Error, Result, C64};

/// Entries of raw Gaussian kernels below this magnitude are dropped.
pub const WINDOW_FLOOR: f64 = 1e-15;

const DEGENERATE_NORM: f64 = 1e-10;
const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KernelKind {
    Strict,
    Gaussian { alpha: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelSpec {
    pub kind: KernelKind,
    /// Amplitude for ending the action phase.
    pub a0: C64,
    /// Amplitude for dwelling in the action phase.
    pub a1: C64,
}

impl KernelSpec {
    /// Single-path kernel: always move and end.
    pub fn strict() -> Self {
        Self { kind: KernelKind::Strict, a0: C64::new(1.0, 0.0), a1: ZERO }
    }

    /// Gaussian kernel with the default `a₀ = a₁ = 1/√2`.
    pub fn gaussian(alpha: f64) -> Self {
        let h = C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        Self { kind: KernelKind::Gaussian { alpha }, a0: h, a1: h }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            KernelKind::Strict => {
                let norm = self.a0.norm_sqr() + self.a1.norm_sqr();
                if (norm - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidKernel(format!("|a0|² + |a1|² = {norm}, expected 1")));
                }
            }
            KernelKind::Gaussian { alpha } => {
                if !(alpha > 0.0) || !alpha.is_finite() {
                    return Err(Error::InvalidKernel(format!("alpha = {alpha} must be positive")));
                }
                if self.a0 == ZERO && self.a1 == ZERO {
                    return Err(Error::InvalidKernel("a0 and a1 are both zero".into()));
                }
            }
        }
        if ![self.a0, self.a1].iter().all(|a| a.re.is_finite() && a.im.is_finite()) {
            return Err(Error::InvalidKernel("non-finite coefficient".into()));
        }
        Ok(())
    }
}

/// Kernel values `g(r, c′)` indexed by `[c′][r mod L]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawKernel {
    lattice: usize,
    direction: i64,
    values: [Vec<C64>; 2],
}

impl RawKernel {
    pub fn zeros(lattice: usize, direction: i64) -> Self {
        Self { lattice, direction, values: [vec![ZERO; lattice], vec![ZERO; lattice]] }
    }

    pub fn lattice(&self) -> usize {
        self.lattice
    }

    pub fn direction(&self) -> i64 {
        self.direction
    }

    pub fn get(&self, r: i64, c: u8) -> C64 {
        self.values[c as usize][offset(r, self.lattice)]
    }

    pub fn set(&mut self, r: i64, c: u8, value: C64) {
        let l = self.lattice;
        self.values[c as usize][offset(r, l)] = value;
    }

    pub fn values(&self, c: u8) -> &[C64] {
        &self.values[c as usize]
    }

    pub fn nonzeros(&self) -> usize {
        self.values.iter().flatten().filter(|v| **v != ZERO).count()
    }
}

fn offset(r: i64, l: usize) -> usize {
    r.rem_euclid(l as i64) as usize
}

/// Symmetric window of offsets `r ∈ [−⌊L/2⌋, ⌈L/2⌉)`.
fn window(l: usize) -> impl Iterator<Item = i64> {
    let lo = -((l / 2) as i64);
    lo..lo + l as i64
}

pub fn gaussian_kernel(o: Output, spec: &KernelSpec, lattice: usize) -> Result<RawKernel> {
    let KernelKind::Gaussian { alpha } = spec.kind else {
        return Err(Error::InvalidKernel("gaussian_kernel needs a gaussian spec".into()));
    };
    spec.validate()?;
    if lattice < 2 {
        return Err(Error::InvalidParams(format!("lattice size {lattice} < 2")));
    }
    let dir = o.direction();
    let mut k = RawKernel::zeros(lattice, dir);
    for r in window(lattice) {
        for (c, a) in [(0u8, spec.a0), (1u8, spec.a1)] {
            // Exponent vanishes at the target offset: `dir` when ending, 0 when dwelling.
            let centre = if c == 0 { dir } else { 0 };
            let dist = (r - centre) as f64;
            let v = a * (-alpha * dist * dist).exp();
            if v.norm() >= WINDOW_FLOOR {
                k.set(r, c, v);
            }
        }
    }
    Ok(k)
}

/// Two-entry kernel: `g(dir, 0) = a₀`, `g(0, 1) = a₁`.
pub fn strict_kernel(o: Output, spec: &KernelSpec, lattice: usize) -> RawKernel {
    let dir = o.direction();
    let mut k = RawKernel::zeros(lattice, dir);
    k.set(dir, 0, spec.a0);
    k.set(0, 1, k.get(0, 1) + spec.a1);
    k
}

/// Builds the raw kernel for `o` according to the spec's kind.
pub fn raw_kernel(o: Output, spec: &KernelSpec, lattice: usize) -> Result<RawKernel> {
    spec.validate()?;
    match spec.kind {
        KernelKind::Strict => Ok(strict_kernel(o, spec, lattice)),
        KernelKind::Gaussian { .. } => gaussian_kernel(o, spec, lattice),
    }
}

/// Translation-invariant isometry `A` plus its complement `B`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionColumnMap {
    lattice: usize,
    direction: i64,
    action: [Vec<C64>; 2],
    entry: [Vec<C64>; 2],
    raw_deviation: f64,
}

impl ActionColumnMap {
    pub fn lattice(&self) -> usize {
        self.lattice
    }

    pub fn direction(&self) -> i64 {
        self.direction
    }

    /// `A(x + r, c′ | x)`.
    pub fn action(&self, r: i64, c: u8) -> C64 {
        self.action[c as usize][offset(r, self.lattice)]
    }

    /// `B(x + r, c′ | x)`, the dressed hand-over state.
    pub fn entry(&self, r: i64, c: u8) -> C64 {
        self.entry[c as usize][offset(r, self.lattice)]
    }

    pub fn action_values(&self, c: u8) -> &[C64] {
        &self.action[c as usize]
    }

    pub fn entry_values(&self, c: u8) -> &[C64] {
        &self.entry[c as usize]
    }

    /// Largest entrywise change relative to the raw kernel.
    pub fn raw_deviation(&self) -> f64 {
        self.raw_deviation
    }

    /// Action column for robot site `x`, as `(x′, c′, amplitude)`.
    pub fn column(&self, x: usize) -> Vec<(usize, u8, C64)> {
        let l = self.lattice;
        (0..2u8)
            .flat_map(|c| (0..l).map(move |u| ((x + u) % l, c, u)))
            .map(|(xp, c, u)| (xp, c, self.action[c as usize][u]))
            .filter(|(_, _, a)| *a != ZERO)
            .collect()
    }

    pub fn nonzeros(&self) -> usize {
        self.action.iter().flatten().filter(|v| **v != ZERO).count()
    }

    /// Same map with the raw values taken as-is (no normalization).
    pub fn from_raw_unchecked(raw: &RawKernel) -> Self {
        Self {
            lattice: raw.lattice,
            direction: raw.direction,
            action: raw.values.clone(),
            entry: complement(&raw.values, raw.lattice),
            raw_deviation: 0.0,
        }
    }

    pub fn as_raw(&self) -> RawKernel {
        RawKernel { lattice: self.lattice, direction: self.direction, values: self.action.clone() }
    }

    /// `max |⟨col(x), col(x′)⟩ − δ|` over the explicit `2L × L` action matrix.
    pub fn action_gram_deviation(&self) -> f64 {
        gram_deviation(&[&self.action], self.lattice)
    }

    /// Same check for the full `2L × 2L` matrix `[A | B]`.
    pub fn fiber_gram_deviation(&self) -> f64 {
        gram_deviation(&[&self.action, &self.entry], self.lattice)
    }
}

fn gram_deviation(blocks: &[&[Vec<C64>; 2]], l: usize) -> f64 {
    let col = |b: usize, x: usize, xp: usize, c: usize| blocks[b][c][(xp + l - x) % l];
    let cols: Vec<(usize, usize)> =
        (0..blocks.len()).flat_map(|b| (0..l).map(move |x| (b, x))).collect();
    let mut worst: f64 = 0.0;
    for (i, &(bi, xi)) in cols.iter().enumerate() {
        for (j, &(bj, xj)) in cols.iter().enumerate() {
            let mut g = ZERO;
            for c in 0..2 {
                for xp in 0..l {
                    g += col(bi, xi, xp, c).conj() * col(bj, xj, xp, c);
                }
            }
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g - target).norm());
        }
    }
    worst
}

fn twiddle(l: usize, k: usize, sign: f64) -> C64 {
    C64::from_polar(1.0, sign * 2.0 * PI * (k % l) as f64 / l as f64)
}

fn dft(values: &[C64], sign: f64) -> Vec<C64> {
    let l = values.len();
    (0..l)
        .map(|m| values.iter().enumerate().map(|(u, v)| v * twiddle(l, m * u, sign)).sum())
        .collect()
}

fn inverse(symbol: &[C64]) -> Vec<C64> {
    let l = symbol.len() as f64;
    dft(symbol, 1.0).into_iter().map(|v| v / l).collect()
}

fn complement_symbol(v0: C64, v1: C64) -> (C64, C64) {
    let m = v0.norm();
    if m > 1e-12 {
        (-v1.conj() * (v0 / m), C64::new(m, 0.0))
    } else {
        (-v1.conj(), ZERO)
    }
}

fn complement(values: &[Vec<C64>; 2], l: usize) -> [Vec<C64>; 2] {
    let g0 = dft(&values[0], -1.0);
    let g1 = dft(&values[1], -1.0);
    let (w0, w1): (Vec<C64>, Vec<C64>) =
        (0..l).map(|m| complement_symbol(g0[m], g1[m])).unzip();
    [inverse(&w0), inverse(&w1)]
}

/// Normalizes the kernel's momentum symbol, producing an exact isometry.
pub fn unitarize(raw: &RawKernel) -> Result<ActionColumnMap> {
    let l = raw.lattice;
    if raw.nonzeros() == 0 {
        return Err(Error::InvalidKernel("kernel has no nonzero entries".into()));
    }
    let g0 = dft(&raw.values[0], -1.0);
    let g1 = dft(&raw.values[1], -1.0);
    let mut v0 = Vec::with_capacity(l);
    let mut v1 = Vec::with_capacity(l);
    let mut w0 = Vec::with_capacity(l);
    let mut w1 = Vec::with_capacity(l);
    for m in 0..l {
        let norm = (g0[m].norm_sqr() + g1[m].norm_sqr()).sqrt();
        if norm < DEGENERATE_NORM {
            return Err(Error::DegenerateKernel { momentum: m, norm });
        }
        let (a, b) = (g0[m] / norm, g1[m] / norm);
        let (ca, cb) = complement_symbol(a, b);
        v0.push(a);
        v1.push(b);
        w0.push(ca);
        w1.push(cb);
    }
    let action = [inverse(&v0), inverse(&v1)];
    let entry = [inverse(&w0), inverse(&w1)];
    let raw_deviation = (0..2)
        .flat_map(|c| (0..l).map(move |u| (c, u)))
        .map(|(c, u)| (action[c][u] - raw.values[c][u]).norm())
        .fold(0.0, f64::max);
    Ok(ActionColumnMap { lattice: l, direction: raw.direction, action, entry, raw_deviation })
}

/// Unitarized kernels for each output symbol.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KernelSet {
    maps: [Option<ActionColumnMap>; 5],
    spec: Option<KernelSpec>,
}

impl KernelSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds and unitarizes the kernel of every symbol.
    pub fn build(spec: &KernelSpec, lattice: usize) -> Result<Self> {
        let mut set = Self::new();
        for o in Output::ALL {
            set.insert(o, unitarize(&raw_kernel(o, spec, lattice)?)?);
        }
        set.spec = Some(*spec);
        Ok(set)
    }

    pub fn insert(&mut self, o: Output, map: ActionColumnMap) {
        self.maps[o.index()] = Some(map);
    }

    pub fn get(&self, o: Output) -> Option<&ActionColumnMap> {
        self.maps[o.index()].as_ref()
    }

    /// The spec this set was built from, if built by [`KernelSet::build`].
    pub fn spec(&self) -> Option<&KernelSpec> {
        self.spec.as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: C64, b: C64, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    #[test]
    fn gaussian_examples() {
        let spec = KernelSpec::gaussian(1.0);
        let (a0, a1) = (spec.a0, spec.a1);
        let e1 = (-1.0f64).exp();
        let g = gaussian_kernel(Output::Mr1, &spec, 8).unwrap();
        assert!(close(g.get(1, 0), a0, 1e-15));
        assert!(close(g.get(0, 0), a0 * e1, 1e-15));
        assert!(close(g.get(0, 1), a1, 1e-15));
        assert!(close(g.get(1, 1), a1 * e1, 1e-15));

        let g = gaussian_kernel(Output::Ml1, &spec, 8).unwrap();
        assert!(close(g.get(-1, 0), a0, 1e-15));
        assert!(close(g.get(0, 0), a0 * e1, 1e-15));

        let g = gaussian_kernel(Output::Dn, &spec, 8).unwrap();
        assert!(close(g.get(0, 0), a0, 1e-15));
        assert!(close(g.get(0, 1), a1, 1e-15));
    }

    #[test]
    fn sharp_gaussian_truncates() {
        let spec = KernelSpec::gaussian(25.0);
        let g = gaussian_kernel(Output::Mr1, &spec, 12).unwrap();
        for r in window(12) {
            for c in 0..2u8 {
                let centre = if c == 0 { 1 } else { 0 };
                if (r - centre).abs() >= 2 {
                    assert_eq!(g.get(r, c), ZERO, "r={r} c={c}");
                }
            }
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(KernelSpec::gaussian(0.0).validate().is_err());
        assert!(KernelSpec::gaussian(-1.0).validate().is_err());
        let mut s = KernelSpec::strict();
        s.a0 = C64::new(0.9, 0.0);
        assert!(s.validate().is_err());
        let mut g = KernelSpec::gaussian(1.0);
        g.a0 = ZERO;
        g.a1 = ZERO;
        assert!(g.validate().is_err());
        assert!(gaussian_kernel(Output::Mr1, &KernelSpec::strict(), 8).is_err());
    }

    #[test]
    fn strict_examples() {
        let spec = KernelSpec::strict();
        let k = strict_kernel(Output::Mr1, &spec, 8);
        assert_eq!(k.nonzeros(), 1);
        assert_eq!(k.get(1, 0), C64::new(1.0, 0.0));
        let k = strict_kernel(Output::Dn, &spec, 8);
        assert_eq!(k.get(0, 0), C64::new(1.0, 0.0));
        let k = strict_kernel(Output::MrInf, &spec, 8);
        assert_eq!(k.get(1, 0), C64::new(1.0, 0.0));
    }

    #[test]
    fn strict_passes_through_unitarize() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let mixed = KernelSpec { kind: KernelKind::Strict, a0: C64::new(0.6, 0.0), a1: C64::new(0.0, 0.8) };
        for spec in [KernelSpec::strict(), mixed, KernelSpec { kind: KernelKind::Strict, a0: C64::new(h, 0.0), a1: C64::new(h, 0.0) }] {
            for o in Output::ALL {
                let raw = strict_kernel(o, &spec, 8);
                let u = unitarize(&raw).unwrap();
                assert!(u.raw_deviation() < 1e-12, "{o}: {}", u.raw_deviation());
                assert!(u.fiber_gram_deviation() < 1e-12);
            }
        }
    }

    #[test]
    fn strict_without_dwell_enters_on_c1() {
        let u = unitarize(&strict_kernel(Output::Mr1, &KernelSpec::strict(), 8)).unwrap();
        assert!(close(u.entry(0, 1), C64::new(1.0, 0.0), 1e-15));
        let off: f64 = (0..8).map(|r| u.entry(r, 0).norm() + if r == 0 { 0.0 } else { u.entry(r, 1).norm() }).sum();
        assert!(off < 1e-15);
    }

    #[test]
    fn gaussian_unitarized_is_isometric() {
        for alpha in [1.0, 4.0] {
            for o in Output::ALL {
                let u = unitarize(&gaussian_kernel(o, &KernelSpec::gaussian(alpha), 8).unwrap()).unwrap();
                assert!(u.action_gram_deviation() <= 1e-12);
                assert!(u.fiber_gram_deviation() <= 1e-12);
            }
        }
    }

    #[test]
    fn unitarize_is_idempotent() {
        let u = unitarize(&gaussian_kernel(Output::Ml1, &KernelSpec::gaussian(1.0), 12).unwrap()).unwrap();
        let v = unitarize(&u.as_raw()).unwrap();
        assert!(v.raw_deviation() <= 1e-12);
    }

    #[test]
    fn degenerate_kernel_is_rejected() {
        // ĝ₀(k) = 1 + e^{-ik} vanishes at k = π.
        let mut raw = RawKernel::zeros(8, 1);
        raw.set(0, 0, C64::new(1.0, 0.0));
        raw.set(1, 0, C64::new(1.0, 0.0));
        assert!(matches!(unitarize(&raw), Err(Error::DegenerateKernel { momentum: 4, .. })));
        assert!(unitarize(&RawKernel::zeros(8, 1)).is_err());
    }

    #[test]
    fn raw_gaussian_columns_overlap() {
        let raw = gaussian_kernel(Output::Mr1, &KernelSpec::gaussian(1.0), 8).unwrap();
        let m = ActionColumnMap::from_raw_unchecked(&raw);
        assert!(m.action_gram_deviation() > 1e-3);
    }
}
