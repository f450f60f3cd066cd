//! Double-double (about 106-bit) re-implementation of the ensemble forward
//! pass, read from the model's named tensors. Finite differences taken on
//! this oracle are free of the rounding noise that limits an `f64` check.

#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::HashMap;
use std::ops::{Add, Div, Mul, Neg, Sub};

use webguard_core::neural::Parameters;

const EXP_TERMS: usize = 12;

fn inverse_factorials() -> &'static [Dd; EXP_TERMS + 1] {
    static INV: std::sync::OnceLock<[Dd; EXP_TERMS + 1]> = std::sync::OnceLock::new();
    INV.get_or_init(|| {
        let mut out = [Dd::ONE; EXP_TERMS + 1];
        for n in 1..=EXP_TERMS {
            out[n] = out[n - 1] / Dd::new(n as f64);
        }
        out
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd { hi: s, lo: b - (s - a) }
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };
    const LN2: Dd = Dd {
        hi: std::f64::consts::LN_2,
        lo: 2.319_046_813_846_299_6e-17,
    };

    pub fn new(v: f64) -> Self {
        Dd { hi: v, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }

    fn ldexp(self, k: i32) -> Self {
        let s = 2f64.powi(k);
        Dd {
            hi: self.hi * s,
            lo: self.lo * s,
        }
    }

    pub fn exp(self) -> Self {
        assert!(self.hi.abs() < 700.0, "exp argument out of range: {}", self.hi);
        let k = (self.hi / std::f64::consts::LN_2).round();
        // |r| <= ln2/2, scaled down so that a short series converges.
        let r = (self - Self::LN2 * Dd::new(k)).ldexp(-10);
        // Horner form of the truncated series with precomputed 1/n!.
        let inv = inverse_factorials();
        let mut sum = inv[EXP_TERMS];
        for n in (0..EXP_TERMS).rev() {
            sum = sum * r + inv[n];
        }
        for _ in 0..10 {
            sum = sum * sum;
        }
        sum.ldexp(k as i32)
    }

    pub fn sigmoid(self) -> Self {
        Dd::ONE / (Dd::ONE + (-self).exp())
    }

    pub fn tanh(self) -> Self {
        if self.hi < 0.0 {
            return -(-self).tanh();
        }
        let e = (self.ldexp(1)).neg().exp();
        (Dd::ONE - e) / (Dd::ONE + e)
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, b: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, b.hi);
        let (t, f) = two_sum(self.lo, b.lo);
        let r = quick_two_sum(s, e + t);
        quick_two_sum(r.hi, r.lo + f)
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, b: Dd) -> Dd {
        self + (-b)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, b: Dd) -> Dd {
        let p = self.hi * b.hi;
        let e = self.hi.mul_add(b.hi, -p);
        quick_two_sum(p, e + (self.hi * b.lo + self.lo * b.hi))
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, b: Dd) -> Dd {
        let q1 = self.hi / b.hi;
        let r = self - b * Dd::new(q1);
        let q2 = r.hi / b.hi;
        let r = r - b * Dd::new(q2);
        let q3 = r.hi / b.hi;
        quick_two_sum(q1, q2) + Dd::new(q3)
    }
}

#[derive(Debug, Clone)]
struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<Dd>,
}

/// Named tensors copied out of a model, with element-wise overrides.
#[derive(Debug, Clone)]
pub struct Oracle {
    names: Vec<String>,
    tensors: HashMap<String, Tensor>,
}

impl Oracle {
    pub fn from_model(model: &impl Parameters) -> Self {
        let mut names = Vec::new();
        let mut tensors = HashMap::new();
        for (name, m) in model.tensors() {
            names.push(name.clone());
            tensors.insert(
                name,
                Tensor {
                    rows: m.rows(),
                    cols: m.cols(),
                    data: m.as_slice().iter().map(|&v| Dd::new(v)).collect(),
                },
            );
        }
        Self { names, tensors }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len_of(&self, name: &str) -> usize {
        self.tensors[name].data.len()
    }

    pub fn set(&mut self, name: &str, index: usize, value: f64) {
        self.tensors.get_mut(name).expect("known tensor").data[index] = Dd::new(value);
    }

    fn t(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing tensor {name}"))
    }

    fn has(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// `W x + b` for the dense layer `prefix`.
    fn affine(&self, w: &str, b: Option<&str>, x: &[Dd], out: &mut [Dd]) {
        let w = self.t(w);
        assert_eq!(w.cols, x.len(), "shape of {w:?}");
        for r in 0..w.rows {
            let mut s = match b {
                Some(b) => self.t(b).data[r],
                None => Dd::ZERO,
            };
            for c in 0..w.cols {
                s = s + w.data[r * w.cols + c] * x[c];
            }
            out[r] = out[r] + s;
        }
    }

    fn dense(&self, prefix: &str, x: &[Dd]) -> Vec<Dd> {
        let rows = self.t(&format!("{prefix}.W")).rows;
        let mut y = vec![Dd::ZERO; rows];
        self.affine(&format!("{prefix}.W"), Some(&format!("{prefix}.b")), x, &mut y);
        y
    }

    fn gate(&self, layer: &str, g: &str, x: &[Dd], h: &[Dd]) -> Vec<Dd> {
        let rows = self.t(&format!("{layer}.W_{g}")).rows;
        let mut y = vec![Dd::ZERO; rows];
        self.affine(&format!("{layer}.W_{g}"), Some(&format!("{layer}.b_{g}")), x, &mut y);
        self.affine(&format!("{layer}.U_{g}"), None, h, &mut y);
        y
    }

    fn lstm_layer(&self, layer: &str, xs: &[Vec<Dd>]) -> Vec<Vec<Dd>> {
        let n = self.t(&format!("{layer}.U_i")).rows;
        let (mut h, mut c) = (vec![Dd::ZERO; n], vec![Dd::ZERO; n]);
        let mut out = Vec::new();
        for x in xs {
            let i = self.gate(layer, "i", x, &h);
            let f = self.gate(layer, "f", x, &h);
            let g = self.gate(layer, "c", x, &h);
            let o = self.gate(layer, "o", x, &h);
            for k in 0..n {
                c[k] = f[k].sigmoid() * c[k] + i[k].sigmoid() * g[k].tanh();
                h[k] = o[k].sigmoid() * c[k].tanh();
            }
            out.push(h.clone());
        }
        out
    }

    fn gru_layer(&self, layer: &str, xs: &[Vec<Dd>]) -> Vec<Vec<Dd>> {
        let n = self.t(&format!("{layer}.U_z")).rows;
        let mut h = vec![Dd::ZERO; n];
        let mut out = Vec::new();
        for x in xs {
            let z: Vec<Dd> = self.gate(layer, "z", x, &h).into_iter().map(Dd::sigmoid).collect();
            let r: Vec<Dd> = self.gate(layer, "r", x, &h).into_iter().map(Dd::sigmoid).collect();
            let rh: Vec<Dd> = r.iter().zip(&h).map(|(a, b)| *a * *b).collect();
            let mut g = vec![Dd::ZERO; n];
            self.affine(&format!("{layer}.W_h"), Some(&format!("{layer}.b_h")), x, &mut g);
            self.affine(&format!("{layer}.U_h"), None, &rh, &mut g);
            for k in 0..n {
                h[k] = z[k] * h[k] + (Dd::ONE - z[k]) * g[k].tanh();
            }
            out.push(h.clone());
        }
        out
    }

    fn recurrent_ae(&self, prefix: &str, x: &[f64]) -> Vec<Dd> {
        let mut seq: Vec<Vec<Dd>> = x.iter().map(|&v| vec![Dd::new(v)]).collect();
        for part in ["enc", "dec"] {
            let mut k = 1;
            while self.has(&format!(
                "{prefix}_{part}{k}.b_{}",
                if prefix == "lstm" { "i" } else { "z" }
            )) {
                let layer = format!("{prefix}_{part}{k}");
                seq = if prefix == "lstm" {
                    self.lstm_layer(&layer, &seq)
                } else {
                    self.gru_layer(&layer, &seq)
                };
                k += 1;
            }
        }
        seq.iter().map(|h| self.dense(&format!("{prefix}_out"), h)[0]).collect()
    }

    fn stacked_ae(&self, x: &[f64]) -> Vec<Dd> {
        let mut v: Vec<Dd> = x.iter().map(|&a| Dd::new(a)).collect();
        let mut k = 1;
        while self.has(&format!("stacked_dense{k}.W")) {
            v = self.dense(&format!("stacked_dense{k}"), &v);
            k += 1;
        }
        if self.has("stacked_proj.W") {
            v = self.dense("stacked_proj", &v);
        }
        v
    }

    /// Outputs of the three sub-models, in concatenation order.
    fn parts(&self, x: &[f64]) -> [Vec<Dd>; 3] {
        [
            self.recurrent_ae("lstm", x),
            self.recurrent_ae("gru", x),
            self.stacked_ae(x),
        ]
    }

    /// Recomputes only the sub-model owning tensor `name`.
    fn parts_after_change(&self, name: &str, x: &[f64], base: &[Vec<Dd>; 3]) -> [Vec<Dd>; 3] {
        let mut parts = base.clone();
        if name.starts_with("lstm_") {
            parts[0] = self.recurrent_ae("lstm", x);
        } else if name.starts_with("gru_") {
            parts[1] = self.recurrent_ae("gru", x);
        } else if name.starts_with("stacked_") {
            parts[2] = self.stacked_ae(x);
        }
        parts
    }

    fn compress(&self, parts: &[Vec<Dd>; 3]) -> Vec<Dd> {
        self.dense("compression", &parts.concat())
    }

    pub fn reconstruct(&self, x: &[f64]) -> Vec<Dd> {
        self.compress(&self.parts(x))
    }

    pub fn mae(&self, x: &[f64]) -> Dd {
        mae_of(&self.reconstruct(x), x)
    }
}

fn mae_of(x_hat: &[Dd], x: &[f64]) -> Dd {
    let mut s = Dd::ZERO;
    for (a, &b) in x_hat.iter().zip(x) {
        s = s + (*a - Dd::new(b)).abs();
    }
    s / Dd::new(x.len() as f64)
}

#[derive(Debug, Clone)]
pub struct HighPrecisionCheck {
    pub max_relative_error: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Central differences `(f(θ+eps) − f(θ−eps)) / ((θ+eps) − (θ−eps))` on the
/// oracle, compared with `analytic` by `|a − n| / max(1e-8, |a| + |n|)`.
pub fn check_gradient(model: &impl Parameters, analytic: &impl Parameters, x: &[f64], eps: f64) -> HighPrecisionCheck {
    let base = Oracle::from_model(model);
    let grads: HashMap<String, Vec<f64>> = analytic
        .tensors()
        .into_iter()
        .map(|(n, m)| (n, m.as_slice().to_vec()))
        .collect();
    let mut report = HighPrecisionCheck {
        max_relative_error: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let originals: HashMap<String, Vec<f64>> = model
        .tensors()
        .into_iter()
        .map(|(n, m)| (n, m.as_slice().to_vec()))
        .collect();
    let base_parts = base.parts(x);
    let eval = |o: &Oracle, name: &str| mae_of(&o.compress(&o.parts_after_change(name, x, &base_parts)), x);
    let mut probe = base.clone();
    for name in base.names() {
        for i in 0..base.len_of(name) {
            let p = originals[name][i];
            let (up, down) = (p + eps, p - eps);
            probe.set(name, i, up);
            let plus = eval(&probe, name);
            probe.set(name, i, down);
            let minus = eval(&probe, name);
            probe.set(name, i, p);
            let numeric = ((plus - minus) / (Dd::new(up) - Dd::new(down))).to_f64();
            let a = grads[name][i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst_tensor = name.clone();
                report.worst_index = i;
            }
            report.checked += 1;
        }
    }
    report
}
