//! Finite configuration basis `(y, x, d, s, node, o, c)`.
//!
//! Basis indices use a fixed mixed-radix order with `y` most significant:
//!
//! ```text
//! index = ((((((y·L + x)·D + d̃)·S + s)·7 + node)·5 + o)·2 + c,   d̃ = d + (2^N − 1)
//! ```
//!
//! with `D = 2^{N+1} − 1` running-memory values and `S = 2^N` permanent-memory
//! values. The `(d, s, node, o)` block is contiguous, so it is also exposed as
//! an "internal" index used by the transition table.

use std::collections::BTreeMap;
use std::fmt;

use crate::{Error, Result, C64};

pub const NODE_COUNT: usize = 7;
pub const OUTPUT_COUNT: usize = 5;
pub const MAX_MEMORY_BITS: u32 = 6;

/// Computation node of the on-board machine.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Node {
    /// Observe: is the particle at the robot's site?
    S0,
    /// Increment the running memory.
    S1,
    /// Cap test, then hand over to the search action.
    S2,
    /// Copy running memory into permanent memory.
    F1,
    /// Post-copy decrement and branch into return or ballast.
    F2,
    /// Return decrement and test.
    R0,
    /// Ballast decrement and test.
    B0,
}

impl Node {
    pub const ALL: [Node; NODE_COUNT] = [
        Node::S0,
        Node::S1,
        Node::S2,
        Node::F1,
        Node::F2,
        Node::R0,
        Node::B0,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Node> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Node::S0 => "S0",
            Node::S1 => "S1",
            Node::S2 => "S2",
            Node::F1 => "F1",
            Node::F2 => "F2",
            Node::R0 => "R0",
            Node::B0 => "B0",
        }
    }
}

/// Output symbol naming the pending action.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Output {
    /// One step right (search).
    Mr1,
    /// One step left (return).
    Ml1,
    /// Stationary (ballast).
    Dn,
    /// Unbounded right drift (particle never found).
    MrInf,
    /// Unbounded left drift (task finished).
    MlInf,
}

impl Output {
    pub const ALL: [Output; OUTPUT_COUNT] = [
        Output::Mr1,
        Output::Ml1,
        Output::Dn,
        Output::MrInf,
        Output::MlInf,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Output> {
        Self::ALL.get(i).copied()
    }

    /// Lattice direction of the action selected by this symbol.
    pub fn direction(self) -> i64 {
        match self {
            Output::Mr1 | Output::MrInf => 1,
            Output::Ml1 | Output::MlInf => -1,
            Output::Dn => 0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Output::Mr1 => "MR1",
            Output::Ml1 => "ML1",
            Output::Dn => "DN",
            Output::MrInf => "MRINF",
            Output::MlInf => "MLINF",
        }
    }

    pub fn from_name(name: &str) -> Option<Output> {
        Self::ALL.into_iter().find(|o| o.name().eq_ignore_ascii_case(name))
    }
}

impl fmt::Display for Output {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Lattice size and memory width; fixes the configuration space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SystemParams {
    lattice: usize,
    memory_bits: u32,
    dimension: usize,
}

impl SystemParams {
    pub fn new(lattice: usize, memory_bits: u32) -> Result<Self> {
        if lattice < 2 {
            return Err(Error::InvalidParams(format!("lattice size {lattice} < 2")));
        }
        if memory_bits < 1 || memory_bits > MAX_MEMORY_BITS {
            return Err(Error::InvalidParams(format!(
                "memory width {memory_bits} outside 1..={MAX_MEMORY_BITS}"
            )));
        }
        let d_radix = (1usize << (memory_bits + 1)) - 1;
        let s_radix = 1usize << memory_bits;
        let dimension = [lattice, lattice, d_radix, s_radix, NODE_COUNT, OUTPUT_COUNT, 2]
            .iter()
            .try_fold(1usize, |acc, &f| acc.checked_mul(f))
            .ok_or(Error::DimensionOverflow)?;
        Ok(Self { lattice, memory_bits, dimension })
    }

    /// Lattice site count `L`.
    pub fn lattice(&self) -> usize {
        self.lattice
    }

    /// Memory width `N`.
    pub fn memory_bits(&self) -> u32 {
        self.memory_bits
    }

    /// Largest running-memory magnitude, `2^N − 1`.
    pub fn d_max(&self) -> i64 {
        (1i64 << self.memory_bits) - 1
    }

    pub fn d_radix(&self) -> usize {
        (1usize << (self.memory_bits + 1)) - 1
    }

    pub fn s_radix(&self) -> usize {
        1usize << self.memory_bits
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Number of `(d, s, node, o)` combinations.
    pub fn internal_count(&self) -> usize {
        self.d_radix() * self.s_radix() * NODE_COUNT * OUTPUT_COUNT
    }

    /// Basis states sharing one value of `y`.
    pub fn y_stride(&self) -> usize {
        self.dimension / self.lattice
    }

    /// Circular `d ± 1` on the odd-size running register.
    pub fn wrap_d(&self, d: i64) -> i64 {
        let m = self.d_max();
        (d + m).rem_euclid(self.d_radix() as i64) - m
    }

    pub fn internal_index(&self, st: InternalState) -> usize {
        let dt = (st.d + self.d_max()) as usize;
        ((dt * self.s_radix() + st.s as usize) * NODE_COUNT + st.node.index()) * OUTPUT_COUNT
            + st.o.index()
    }

    pub fn internal_state(&self, mut i: usize) -> InternalState {
        let o = Output::from_index(i % OUTPUT_COUNT).unwrap();
        i /= OUTPUT_COUNT;
        let node = Node::from_index(i % NODE_COUNT).unwrap();
        i /= NODE_COUNT;
        let s = (i % self.s_radix()) as u32;
        i /= self.s_radix();
        let d = i as i64 - self.d_max();
        InternalState { d, s, node, o }
    }

    /// Packs `(y, x, internal, c)` without range checks.
    pub fn pack(&self, y: usize, x: usize, internal: usize, c: u8) -> usize {
        (((y * self.lattice + x) * self.internal_count()) + internal) * 2 + c as usize
    }

    /// Inverse of [`SystemParams::pack`].
    pub fn unpack(&self, index: usize) -> (usize, usize, usize, u8) {
        let c = (index & 1) as u8;
        let rest = index >> 1;
        let internal = rest % self.internal_count();
        let rest = rest / self.internal_count();
        (rest / self.lattice, rest % self.lattice, internal, c)
    }

    pub fn encode(&self, cfg: &Configuration) -> Result<usize> {
        cfg.validate(self)?;
        Ok(self.pack(cfg.y, cfg.x, self.internal_index(cfg.internal()), cfg.c))
    }

    pub fn decode(&self, index: usize) -> Result<Configuration> {
        if index >= self.dimension {
            return Err(Error::IndexOutOfRange { index, dimension: self.dimension });
        }
        let (y, x, internal, c) = self.unpack(index);
        let st = self.internal_state(internal);
        Ok(Configuration { y, x, d: st.d, s: st.s, node: st.node, o: st.o, c })
    }
}

/// The `(d, s, node, o)` part of a configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct InternalState {
    pub d: i64,
    pub s: u32,
    pub node: Node,
    pub o: Output,
}

/// One classical configuration of robot, machine and particle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Configuration {
    pub y: usize,
    pub x: usize,
    pub d: i64,
    pub s: u32,
    pub node: Node,
    pub o: Output,
    pub c: u8,
}

impl Configuration {
    /// Task start: `d = 0, s = 0, S0, MR1, c = 0`.
    pub fn start(y: usize, x: usize) -> Self {
        Self { y, x, d: 0, s: 0, node: Node::S0, o: Output::Mr1, c: 0 }
    }

    pub fn internal(&self) -> InternalState {
        InternalState { d: self.d, s: self.s, node: self.node, o: self.o }
    }

    pub fn with_internal(mut self, st: InternalState) -> Self {
        self.d = st.d;
        self.s = st.s;
        self.node = st.node;
        self.o = st.o;
        self
    }

    pub fn validate(&self, p: &SystemParams) -> Result<()> {
        let check = |ok: bool, field: &'static str, value: i64| {
            if ok { Ok(()) } else { Err(Error::OutOfRange { field, value }) }
        };
        check(self.y < p.lattice(), "y", self.y as i64)?;
        check(self.x < p.lattice(), "x", self.x as i64)?;
        check(self.d.abs() <= p.d_max(), "d", self.d)?;
        check((self.s as usize) < p.s_radix(), "s", self.s as i64)?;
        check(self.c <= 1, "c", self.c as i64)
    }

    pub fn register(&self, r: Register) -> i64 {
        match r {
            Register::Y => self.y as i64,
            Register::X => self.x as i64,
            Register::D => self.d,
            Register::S => self.s as i64,
            Register::Node => self.node.index() as i64,
            Register::O => self.o.index() as i64,
            Register::C => self.c as i64,
        }
    }
}

/// One register of the configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Register {
    Y,
    X,
    D,
    S,
    Node,
    O,
    C,
}

impl Register {
    pub const ALL: [Register; 7] = [
        Register::Y,
        Register::X,
        Register::D,
        Register::S,
        Register::Node,
        Register::O,
        Register::C,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Register::Y => "y",
            Register::X => "x",
            Register::D => "d",
            Register::S => "s",
            Register::Node => "node",
            Register::O => "o",
            Register::C => "c",
        }
    }

    pub fn from_name(name: &str) -> Option<Register> {
        Self::ALL.into_iter().find(|r| r.name() == name)
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }

    /// Inclusive value range of this register.
    pub fn range(self, p: &SystemParams) -> (i64, i64) {
        match self {
            Register::Y | Register::X => (0, p.lattice() as i64 - 1),
            Register::D => (-p.d_max(), p.d_max()),
            Register::S => (0, p.s_radix() as i64 - 1),
            Register::Node => (0, NODE_COUNT as i64 - 1),
            Register::O => (0, OUTPUT_COUNT as i64 - 1),
            Register::C => (0, 1),
        }
    }

    /// Human-readable rendering of a register value.
    pub fn format_value(self, v: i64) -> String {
        match self {
            Register::Node => Node::from_index(v as usize).map_or(v.to_string(), |n| n.to_string()),
            Register::O => Output::from_index(v as usize).map_or(v.to_string(), |o| o.to_string()),
            _ => v.to_string(),
        }
    }
}

/// Nonempty subset of registers, iterated in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SubsystemSelector(u8);

impl SubsystemSelector {
    pub fn new(registers: &[Register]) -> Result<Self> {
        let mask = registers.iter().fold(0u8, |m, r| m | r.bit());
        if mask == 0 {
            return Err(Error::InvalidParams("empty register selector".into()));
        }
        Ok(Self(mask))
    }

    pub fn single(r: Register) -> Self {
        Self(r.bit())
    }

    pub fn contains(&self, r: Register) -> bool {
        self.0 & r.bit() != 0
    }

    pub fn registers(&self) -> impl Iterator<Item = Register> + '_ {
        Register::ALL.into_iter().filter(|r| self.contains(*r))
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    fn key(&self, cfg: &Configuration) -> Vec<i64> {
        self.registers().map(|r| cfg.register(r)).collect()
    }
}

/// Complex amplitudes over the full configuration basis (dense storage).
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    params: SystemParams,
    amps: Vec<C64>,
}

impl StateVector {
    pub fn zeros(params: SystemParams) -> Self {
        Self { params, amps: vec![C64::new(0.0, 0.0); params.dimension()] }
    }

    pub fn basis(params: SystemParams, cfg: &Configuration) -> Result<Self> {
        let mut v = Self::zeros(params);
        v.amps[params.encode(cfg)?] = C64::new(1.0, 0.0);
        Ok(v)
    }

    pub fn from_amplitudes(params: SystemParams, amps: Vec<C64>) -> Result<Self> {
        if amps.len() != params.dimension() {
            return Err(Error::DimensionMismatch { expected: params.dimension(), found: amps.len() });
        }
        Ok(Self { params, amps })
    }

    pub fn params(&self) -> &SystemParams {
        &self.params
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amps
    }

    pub fn amplitudes_mut(&mut self) -> &mut [C64] {
        &mut self.amps
    }

    pub fn into_amplitudes(self) -> Vec<C64> {
        self.amps
    }

    pub fn amplitude(&self, cfg: &Configuration) -> Result<C64> {
        Ok(self.amps[self.params.encode(cfg)?])
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    /// Nonzero entries as `(index, amplitude)`.
    pub fn support(&self) -> impl Iterator<Item = (usize, C64)> + '_ {
        self.amps.iter().copied().enumerate().filter(|(_, a)| *a != C64::new(0.0, 0.0))
    }

    pub fn inner(&self, other: &StateVector) -> C64 {
        self.amps.iter().zip(&other.amps).map(|(a, b)| a.conj() * b).sum()
    }

    pub fn scaled_add(&mut self, alpha: C64, other: &StateVector) {
        for (a, b) in self.amps.iter_mut().zip(&other.amps) {
            *a += alpha * b;
        }
    }

    /// Zeroes amplitudes of magnitude below `threshold`.
    pub fn chop(&mut self, threshold: f64) {
        for a in &mut self.amps {
            if a.norm() < threshold {
                *a = C64::new(0.0, 0.0);
            }
        }
    }

    /// Projector onto configurations whose selected registers equal `values`
    /// (given in the selector's canonical order).
    pub fn project(&self, selector: SubsystemSelector, values: &[i64]) -> Result<StateVector> {
        if values.len() != selector.len() {
            return Err(Error::InvalidParams(format!(
                "selector has {} registers but {} values were given",
                selector.len(),
                values.len()
            )));
        }
        for (r, &v) in selector.registers().zip(values) {
            let (lo, hi) = r.range(&self.params);
            if v < lo || v > hi {
                return Err(Error::OutOfRange { field: r.name(), value: v });
            }
        }
        Ok(self.filter(|cfg| selector.key(cfg) == values))
    }

    /// Keeps amplitudes whose decoded configuration satisfies `keep`.
    pub fn filter(&self, keep: impl Fn(&Configuration) -> bool) -> StateVector {
        let mut out = StateVector::zeros(self.params);
        for (i, a) in self.support() {
            let cfg = self.params.decode(i).expect("index below dimension");
            if keep(&cfg) {
                out.amps[i] = a;
            }
        }
        out
    }

    /// Born-rule probability table over the selected registers.
    pub fn marginal(&self, selector: SubsystemSelector) -> Marginal {
        let mut table: BTreeMap<Vec<i64>, f64> = BTreeMap::new();
        let mut total = 0.0;
        for (i, a) in self.support() {
            let cfg = self.params.decode(i).expect("index below dimension");
            let p = a.norm_sqr();
            *table.entry(selector.key(&cfg)).or_insert(0.0) += p;
            total += p;
        }
        Marginal { selector, table, total, unnormalized: (total - 1.0).abs() > 1e-9 }
    }
}

/// Probability table produced by [`StateVector::marginal`].
#[derive(Clone, Debug, PartialEq)]
pub struct Marginal {
    pub selector: SubsystemSelector,
    /// Keys are register values in canonical register order.
    pub table: BTreeMap<Vec<i64>, f64>,
    pub total: f64,
    /// Set when the input state's norm deviated from 1 by more than 1e-9.
    pub unnormalized: bool,
}

impl Marginal {
    pub fn get(&self, key: &[i64]) -> f64 {
        self.table.get(key).copied().unwrap_or(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p42() -> SystemParams {
        SystemParams::new(4, 2).unwrap()
    }

    #[test]
    fn dimension_matches_product_formula() {
        assert_eq!(p42().dimension(), 31_360);
        assert_eq!(SystemParams::new(8, 3).unwrap().dimension(), 537_600);
        assert_eq!(SystemParams::new(12, 3).unwrap().dimension(), 1_209_600);
    }

    #[test]
    fn rejects_bad_params() {
        assert!(SystemParams::new(1, 2).is_err());
        assert!(SystemParams::new(4, 0).is_err());
        assert!(SystemParams::new(4, 7).is_err());
        assert!(matches!(
            SystemParams::new(usize::MAX / 4, 6),
            Err(Error::DimensionOverflow)
        ));
    }

    #[test]
    fn encode_examples() {
        let p = p42();
        assert_eq!(p.encode(&Configuration::start(0, 0)).unwrap(), 840);
        let mut cfg = Configuration::start(0, 0);
        cfg.d = -3;
        assert_eq!(p.encode(&cfg).unwrap(), 0);
        assert_eq!(p.decode(840).unwrap(), Configuration::start(0, 0));
        assert_eq!(p.decode(0).unwrap(), cfg);
    }

    #[test]
    fn decode_last_index_is_maximal() {
        let p = p42();
        let cfg = p.decode(p.dimension() - 1).unwrap();
        assert_eq!(
            cfg,
            Configuration { y: 3, x: 3, d: 3, s: 3, node: Node::B0, o: Output::MlInf, c: 1 }
        );
        assert!(p.decode(p.dimension()).is_err());
    }

    #[test]
    fn encode_rejects_out_of_range() {
        let p = p42();
        let mut cfg = Configuration::start(0, 4);
        assert!(matches!(p.encode(&cfg), Err(Error::OutOfRange { field: "x", .. })));
        cfg.x = 0;
        cfg.d = 4;
        assert!(p.encode(&cfg).is_err());
        cfg.d = 0;
        cfg.s = 4;
        assert!(p.encode(&cfg).is_err());
    }

    #[test]
    fn exhaustive_roundtrip_small() {
        let p = p42();
        for i in 0..p.dimension() {
            assert_eq!(p.encode(&p.decode(i).unwrap()).unwrap(), i);
        }
    }

    #[test]
    fn wrap_is_circular() {
        let p = p42();
        assert_eq!(p.wrap_d(4), -3);
        assert_eq!(p.wrap_d(-4), 3);
        assert_eq!(p.wrap_d(2), 2);
    }

    #[test]
    fn projector_properties() {
        let p = p42();
        let mut psi = StateVector::zeros(p);
        let a = C64::new(0.6, 0.0);
        let b = C64::new(0.0, 0.8);
        let mut cfg = Configuration::start(1, 2);
        psi.amplitudes_mut()[p.encode(&cfg).unwrap()] = a;
        cfg.c = 1;
        cfg.y = 2;
        psi.amplitudes_mut()[p.encode(&cfg).unwrap()] = b;

        let sel = SubsystemSelector::single(Register::C);
        let p0 = psi.project(sel, &[0]).unwrap();
        assert_eq!(p0.project(sel, &[0]).unwrap(), p0);
        let mut sum = p0.clone();
        sum.scaled_add(C64::new(1.0, 0.0), &psi.project(sel, &[1]).unwrap());
        assert_eq!(sum, psi);

        let single = StateVector::basis(p, &Configuration::start(0, 0)).unwrap();
        let o = SubsystemSelector::single(Register::O);
        assert_eq!(single.project(o, &[Output::Dn.index() as i64]).unwrap().norm_sqr(), 0.0);
        assert!(psi.project(sel, &[2]).is_err());
    }

    #[test]
    fn marginal_examples() {
        let p = p42();
        let mut cfg = Configuration::start(3, 0);
        let point = StateVector::basis(p, &cfg).unwrap();
        let y = SubsystemSelector::single(Register::Y);
        let m = point.marginal(y);
        assert_eq!(m.table.len(), 1);
        assert_eq!(m.get(&[3]), 1.0);
        assert!(!m.unnormalized);

        let mut sup = StateVector::zeros(p);
        let h = C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        cfg.y = 1;
        sup.amplitudes_mut()[p.encode(&cfg).unwrap()] = h;
        cfg.y = 2;
        sup.amplitudes_mut()[p.encode(&cfg).unwrap()] = h;
        let m = sup.marginal(y);
        assert!((m.get(&[1]) - 0.5).abs() < 1e-15);
        assert!((m.get(&[2]) - 0.5).abs() < 1e-15);

        let mut half = point.clone();
        half.amplitudes_mut()[p.encode(&Configuration::start(3, 0)).unwrap()] = h;
        assert!(half.marginal(y).unnormalized);
    }

    #[test]
    fn selector_requires_registers() {
        assert!(SubsystemSelector::new(&[]).is_err());
        let s = SubsystemSelector::new(&[Register::S, Register::Y]).unwrap();
        assert_eq!(s.registers().collect::<Vec<_>>(), vec![Register::Y, Register::S]);
    }
}
