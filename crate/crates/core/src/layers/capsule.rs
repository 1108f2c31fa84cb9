//! Int-8 capsule layer with dynamic routing.
//!
//! The layer is built from four support functions: prediction vectors,
//! coupling coefficients, capsule outputs and the agreement update. Routing
//! logits start at zero on every call.

use serde::{Deserialize, Serialize};

use crate::activations::{softmax_group, squash_rows};
use crate::error::{Error, Result};
use crate::kernels::{mat_add_into, mat_mult_into, QMatrix};
use crate::parallel::{for_each_block, ExecConfig};
use crate::qcore::{check_shift, QFormat, Q7};
use crate::site::SiteKind;

/// Output shifts of every matmul/add site of one capsule layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapsShifts {
    pub inputs_hat_shift: u32,
    /// One per routing iteration.
    pub caps_output_shift: Vec<u32>,
    /// One per routing iteration except the last.
    pub agreement_mul_shift: Vec<u32>,
    /// One per routing iteration except the last.
    pub agreement_add_shift: Vec<u32>,
    /// Fractional bits of `s_j` fed to squash, one per routing iteration.
    pub squash_i_qn: Vec<u32>,
    /// Fractional bits of the routing logits.
    pub b_frac_bits: u32,
}

impl CapsShifts {
    /// All-zero shifts for `routings` iterations with squash inputs in Q0.7.
    pub fn zeros(routings: usize) -> Self {
        let rest = routings.saturating_sub(1);
        CapsShifts {
            inputs_hat_shift: 0,
            caps_output_shift: vec![0; routings],
            agreement_mul_shift: vec![0; rest],
            agreement_add_shift: vec![0; rest],
            squash_i_qn: vec![7; routings],
            b_frac_bits: 7,
        }
    }

    pub fn validate(&self, routings: usize) -> Result<()> {
        let rest = routings.saturating_sub(1);
        let lens = [
            ("caps_output_shift", self.caps_output_shift.len(), routings),
            ("squash_i_qn", self.squash_i_qn.len(), routings),
            ("agreement_mul_shift", self.agreement_mul_shift.len(), rest),
            ("agreement_add_shift", self.agreement_add_shift.len(), rest),
        ];
        for (name, got, want) in lens {
            if got != want {
                return Err(Error::Shape(format!("{name}: expected {want} entries, got {got}")));
            }
        }
        check_shift(self.inputs_hat_shift as i64, "inputs_hat_shift")?;
        for (name, values) in [
            ("caps_output_shift", &self.caps_output_shift),
            ("agreement_mul_shift", &self.agreement_mul_shift),
            ("agreement_add_shift", &self.agreement_add_shift),
            ("squash_i_qn", &self.squash_i_qn),
        ] {
            for &v in values {
                check_shift(v as i64, name)?;
            }
        }
        check_shift(self.b_frac_bits as i64, "b_frac_bits")?;
        Ok(())
    }

    /// Number of scalar scaling parameters stored for the layer.
    pub fn entry_count(&self) -> usize {
        2 + self.caps_output_shift.len()
            + self.agreement_mul_shift.len()
            + self.agreement_add_shift.len()
            + self.squash_i_qn.len()
    }
}

/// A quantized capsule layer: dimensions, weights and shift schedule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapsLayerDesc {
    pub in_caps: usize,
    pub in_dim: usize,
    pub out_caps: usize,
    pub out_dim: usize,
    pub num_routings: usize,
    /// `[out_caps][in_caps][out_dim][in_dim]`.
    pub weights: Vec<Q7>,
    pub shifts: CapsShifts,
}

impl CapsLayerDesc {
    pub fn validate(&self) -> Result<()> {
        if [
            self.in_caps,
            self.in_dim,
            self.out_caps,
            self.out_dim,
            self.num_routings,
        ]
        .contains(&0)
        {
            return Err(Error::Shape("capsule layer dimensions must be positive".into()));
        }
        let want = self.out_caps * self.in_caps * self.out_dim * self.in_dim;
        if self.weights.len() != want {
            return Err(Error::Shape(format!(
                "capsule weights: expected {want} values, got {}",
                self.weights.len()
            )));
        }
        self.shifts.validate(self.num_routings)
    }

    fn uhat_block(&self) -> usize {
        self.in_caps * self.out_dim
    }
}

/// Prediction vectors `u_hat[j][i] = W[j][i] * u_i`, laid out
/// `[out_caps][in_caps][out_dim]`.
pub fn calc_inputs_hat(input: &QMatrix, d: &CapsLayerDesc, exec: &ExecConfig) -> Result<Vec<Q7>> {
    if input.rows != d.in_caps || input.cols != d.in_dim {
        return Err(Error::DimensionMismatch {
            left: input.shape(),
            right: format!("{}x{}", d.in_caps, d.in_dim),
        });
    }
    let mut u_hat = vec![0; d.out_caps * d.uhat_block()];
    let inner = ExecConfig { workers: 1, ..*exec };
    let wblock = d.out_dim * d.in_dim;
    for_each_block(&mut u_hat, d.uhat_block(), exec.workers, |js, chunk| {
        for (r, j) in js.enumerate() {
            for i in 0..d.in_caps {
                let w = &d.weights[(j * d.in_caps + i) * wblock..][..wblock];
                let u = &input.data[i * d.in_dim..(i + 1) * d.in_dim];
                let out = &mut chunk[(r * d.in_caps + i) * d.out_dim..][..d.out_dim];
                mat_mult_into(w, u, d.out_dim, d.in_dim, 1, d.shifts.inputs_hat_shift, &inner, out);
            }
        }
    });
    Ok(u_hat)
}

/// Coupling coefficients: softmax of `b[j][i]` over `j` for each lower
/// capsule `i`, in Q0.7.
pub fn calc_coupling_coefs(b: &[Q7], d: &CapsLayerDesc) -> Vec<Q7> {
    let mut c = vec![0; b.len()];
    let mut column = vec![0; d.out_caps];
    let mut coefs = vec![0; d.out_caps];
    for i in 0..d.in_caps {
        for j in 0..d.out_caps {
            column[j] = b[j * d.in_caps + i];
        }
        softmax_group(&column, d.shifts.b_frac_bits, &mut coefs);
        for j in 0..d.out_caps {
            c[j * d.in_caps + i] = coefs[j];
        }
    }
    c
}

/// `s_j = c[j] * u_hat[j]`, then `v = squash(s)`. Returns `(s, v)`.
pub fn calc_caps_output_traced(
    u_hat: &[Q7],
    c: &[Q7],
    iter: usize,
    d: &CapsLayerDesc,
    exec: &ExecConfig,
) -> (Vec<Q7>, QMatrix) {
    let inner = ExecConfig { workers: 1, ..*exec };
    let shift = d.shifts.caps_output_shift[iter];
    let mut s = vec![0; d.out_caps * d.out_dim];
    for_each_block(&mut s, d.out_dim, exec.workers, |js, chunk| {
        for (r, j) in js.enumerate() {
            let cj = &c[j * d.in_caps..(j + 1) * d.in_caps];
            let uj = &u_hat[j * d.uhat_block()..(j + 1) * d.uhat_block()];
            let out = &mut chunk[r * d.out_dim..(r + 1) * d.out_dim];
            mat_mult_into(cj, uj, 1, d.in_caps, d.out_dim, shift, &inner, out);
        }
    });
    let mut v = vec![0; s.len()];
    squash_rows(&s, d.out_dim, d.shifts.squash_i_qn[iter], exec.workers, &mut v);
    let v = QMatrix {
        data: v,
        rows: d.out_caps,
        cols: d.out_dim,
        fmt: QFormat::Q0_7,
    };
    (s, v)
}

pub fn calc_caps_output(u_hat: &[Q7], c: &[Q7], iter: usize, d: &CapsLayerDesc, exec: &ExecConfig) -> QMatrix {
    calc_caps_output_traced(u_hat, c, iter, d, exec).1
}

/// Adds the agreement `u_hat[j][i] . v_j` to the logits `b[j][i]`.
/// Returns the agreement products.
pub fn calc_agreement_w_prev_caps(
    u_hat: &[Q7],
    v: &QMatrix,
    iter: usize,
    b: &mut [Q7],
    d: &CapsLayerDesc,
    exec: &ExecConfig,
) -> Vec<Q7> {
    let inner = ExecConfig { workers: 1, ..*exec };
    let mul_shift = d.shifts.agreement_mul_shift[iter];
    let add_shift = d.shifts.agreement_add_shift[iter];
    let mut dots = vec![0; b.len()];
    for_each_block(&mut dots, d.in_caps, exec.workers, |js, chunk| {
        for (r, j) in js.enumerate() {
            let uj = &u_hat[j * d.uhat_block()..(j + 1) * d.uhat_block()];
            let out = &mut chunk[r * d.in_caps..(r + 1) * d.in_caps];
            mat_mult_into(uj, v.row(j), d.in_caps, d.out_dim, 1, mul_shift, &inner, out);
        }
    });
    let prev = b.to_vec();
    mat_add_into(&prev, &dots, add_shift, b);
    dots
}

/// Receives each intermediate buffer with its site kind and routing iteration.
pub type Observer<'a> = dyn FnMut(SiteKind, Option<usize>, &[Q7]) + 'a;

/// Runs the layer, reporting every intermediate buffer to `observe`.
pub fn capsule_layer_q7_observed(
    input: &QMatrix,
    d: &CapsLayerDesc,
    exec: &ExecConfig,
    observe: &mut Observer<'_>,
) -> Result<QMatrix> {
    d.validate()?;
    let mut b = vec![0; d.out_caps * d.in_caps];
    let u_hat = calc_inputs_hat(input, d, exec)?;
    observe(SiteKind::UHat, None, &u_hat);
    let mut v = QMatrix::zeros(d.out_caps, d.out_dim, QFormat::Q0_7);
    for r in 0..d.num_routings {
        let c = calc_coupling_coefs(&b, d);
        let (s, out) = calc_caps_output_traced(&u_hat, &c, r, d, exec);
        observe(SiteKind::S, Some(r), &s);
        observe(SiteKind::V, Some(r), &out.data);
        v = out;
        if r + 1 < d.num_routings {
            let dots = calc_agreement_w_prev_caps(&u_hat, &v, r, &mut b, d, exec);
            observe(SiteKind::Agreement, Some(r), &dots);
            observe(SiteKind::Logits, Some(r), &b);
        }
    }
    Ok(v)
}

/// Capsule layer forward pass; returns `[out_caps][out_dim]` in Q0.7.
pub fn capsule_layer_q7(input: &QMatrix, d: &CapsLayerDesc, exec: &ExecConfig) -> Result<QMatrix> {
    capsule_layer_q7_observed(input, d, exec, &mut |_, _, _| {})
}
