//! Matrix-free reference stepper. It applies the task rule and the kernel
//! maps configuration by configuration, with its own index arithmetic and
//! without any entry floor, so it shares no code with the sparse assembly.

#![allow(dead_code)]

use qrobot::action_kernel::{KernelSet, KernelSpec};
use qrobot::config_space::{InternalState, Node, Output, SystemParams};
use qrobot::task_machine::{is_action_fiber, task_rule};
use qrobot::C64;

pub const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cfg {
    pub y: usize,
    pub x: usize,
    pub d: i64,
    pub s: u32,
    pub node: Node,
    pub o: Output,
    pub c: u8,
}

pub struct Oracle {
    pub params: SystemParams,
    l: usize,
    dmax: i64,
    dr: usize,
    sr: usize,
    kernels: KernelSet,
    half_env: Option<Vec<C64>>,
}

impl Oracle {
    pub fn new(l: usize, n: u32, kernel: &KernelSpec) -> Self {
        let dmax = (1i64 << n) - 1;
        Self {
            params: SystemParams::new(l, n).unwrap(),
            l,
            dmax,
            dr: (2 * dmax + 1) as usize,
            sr: 1 << n,
            kernels: KernelSet::build(kernel, l).unwrap(),
            half_env: None,
        }
    }

    /// Adds `exp(−i Δ/2 H)` on both sides, `H = γ (shift + shift†)`, summed
    /// as a Taylor series.
    pub fn with_hopping(mut self, gamma: f64, delta: f64) -> Self {
        let l = self.l;
        let mut h = vec![ZERO; l * l];
        for y in 0..l {
            h[((y + 1) % l) * l + y] += gamma;
            h[((y + l - 1) % l) * l + y] += gamma;
        }
        let factor = C64::new(0.0, -delta / 2.0);
        let mut term = vec![ZERO; l * l];
        for y in 0..l {
            term[y * l + y] = C64::new(1.0, 0.0);
        }
        let mut sum = term.clone();
        for k in 1..80 {
            let mut next = vec![ZERO; l * l];
            for i in 0..l {
                for j in 0..l {
                    next[i * l + j] = (0..l).map(|m| h[i * l + m] * term[m * l + j]).sum::<C64>() * factor / k as f64;
                }
            }
            term = next;
            for (s, t) in sum.iter_mut().zip(&term) {
                *s += t;
            }
        }
        self.half_env = Some(sum);
        self
    }

    pub fn dimension(&self) -> usize {
        self.l * self.l * self.dr * self.sr * 7 * 5 * 2
    }

    pub fn index(&self, c: &Cfg) -> usize {
        let mut i = c.y;
        i = i * self.l + c.x;
        i = i * self.dr + (c.d + self.dmax) as usize;
        i = i * self.sr + c.s as usize;
        i = i * 7 + c.node.index();
        i = i * 5 + c.o.index();
        i * 2 + c.c as usize
    }

    pub fn config(&self, mut i: usize) -> Cfg {
        let c = (i % 2) as u8;
        i /= 2;
        let o = Output::from_index(i % 5).unwrap();
        i /= 5;
        let node = Node::from_index(i % 7).unwrap();
        i /= 7;
        let s = (i % self.sr) as u32;
        i /= self.sr;
        let d = (i % self.dr) as i64 - self.dmax;
        i /= self.dr;
        let x = i % self.l;
        Cfg { y: i / self.l, x, d, s, node, o, c }
    }

    pub fn start(&self, y: usize, x: usize) -> usize {
        self.index(&Cfg { y, x, d: 0, s: 0, node: Node::S0, o: Output::Mr1, c: 0 })
    }

    pub fn basis(&self, i: usize) -> Vec<C64> {
        let mut v = vec![ZERO; self.dimension()];
        v[i] = C64::new(1.0, 0.0);
        v
    }

    fn env(&self, psi: &[C64]) -> Vec<C64> {
        let Some(e) = &self.half_env else { return psi.to_vec() };
        let stride = psi.len() / self.l;
        let mut out = vec![ZERO; psi.len()];
        for (i, &a) in psi.iter().enumerate() {
            if a == ZERO {
                continue;
            }
            let (y, rest) = (i / stride, i % stride);
            for yp in 0..self.l {
                out[yp * stride + rest] += e[yp * self.l + y] * a;
            }
        }
        out
    }

    fn core(&self, psi: &[C64]) -> Vec<C64> {
        let mut out = vec![ZERO; psi.len()];
        for (i, &a) in psi.iter().enumerate() {
            if a == ZERO {
                continue;
            }
            let cfg = self.config(i);
            let st = InternalState { d: cfg.d, s: cfg.s, node: cfg.node, o: cfg.o };
            let (target, kernel) = if cfg.c == 0 {
                let (next, c) = task_rule(&self.params, st, cfg.x == cfg.y)
                    .expect("task rule defined along the trajectory");
                let moved = Cfg { d: next.d, s: next.s, node: next.node, o: next.o, c, ..cfg };
                if c == 1 && is_action_fiber(next.node, next.o) {
                    (moved, Some(true))
                } else {
                    out[self.index(&moved)] += a;
                    continue;
                }
            } else if is_action_fiber(cfg.node, cfg.o) {
                (cfg, Some(false))
            } else {
                out[i] += a;
                continue;
            };
            let map = self.kernels.get(target.o).unwrap();
            let entry = kernel == Some(true);
            for r in 0..self.l {
                for cp in 0..2u8 {
                    let v = if entry { map.entry(r as i64, cp) } else { map.action(r as i64, cp) };
                    if v != ZERO {
                        let dest = Cfg { x: (target.x + r) % self.l, c: cp, ..target };
                        out[self.index(&dest)] += v * a;
                    }
                }
            }
        }
        out
    }

    pub fn step(&self, psi: &[C64]) -> Vec<C64> {
        self.env(&self.core(&self.env(psi)))
    }

    pub fn evolve(&self, psi: &[C64], k: usize) -> Vec<C64> {
        let mut v = psi.to_vec();
        for _ in 0..k {
            v = self.step(&v);
        }
        v
    }

    /// Literal distance distribution computed from the oracle's own decoding.
    pub fn distance(&self, psi: &[C64]) -> Vec<f64> {
        let mut p = vec![0.0; self.sr];
        for (i, a) in psi.iter().enumerate() {
            if *a != ZERO {
                let cfg = self.config(i);
                if cfg.o != Output::Mr1 {
                    p[cfg.s as usize] += a.norm_sqr();
                }
            }
        }
        p
    }
}

pub fn max_diff(a: &[C64], b: &[C64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}
