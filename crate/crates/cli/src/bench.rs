//! Kernel micro-benchmarks.
//!
//! Each row carries a SHA-256 of the kernel output so timing runs double as
//! determinism checks. Operands come from a seeded generator.

use std::fmt;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use capsnet_core::activations::{softmax_q7, squash_rows};
use capsnet_core::kernels::{
    conv2d_hwc_exec, mat_mult_exec, mat_mult_sign_extend_pairs, ConvParams, QMatrix, QTensor, Strategy,
};
use capsnet_core::layers::{capsule_layer_q7, CapsLayerDesc, CapsShifts};
use capsnet_core::parallel::ExecConfig;
use capsnet_core::qcore::{QFormat, Q7};
use capsnet_core::Error;

use crate::commands::sha256_hex;
use crate::{parse_dims, CliError, CliResult, PartitionArg};

/// Fixed CSV header; the first column carries the schema version.
pub const BENCH_CSV_HEADER: &str = "schema,kernel,strategy,dims,iterations,workers,macs,wall_ns,ns_per_mac,checksum";
pub const BENCH_SCHEMA: &str = "capsnet-bench/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BenchKernel {
    Matmul,
    Conv,
    Squash,
    Softmax,
    Caps,
}

impl BenchKernel {
    fn name(self) -> &'static str {
        match self {
            BenchKernel::Matmul => "matmul",
            BenchKernel::Conv => "conv",
            BenchKernel::Squash => "squash",
            BenchKernel::Softmax => "softmax",
            BenchKernel::Caps => "caps",
        }
    }

    /// Default dimensions and their count.
    fn default_dims(self) -> (&'static str, usize) {
        match self {
            BenchKernel::Matmul => ("20x30x40", 3),
            BenchKernel::Conv => ("28x28x1x16x7", 5),
            BenchKernel::Squash => ("1024x4", 2),
            BenchKernel::Softmax => ("1024x10", 2),
            BenchKernel::Caps => ("10x1024x6x4", 4),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchStrategy {
    Exec(Strategy),
    /// Sign-extend-and-pair 16-bit MAC variant; matmul only.
    SignExtendPairs,
}

impl BenchStrategy {
    fn name(self) -> &'static str {
        match self {
            BenchStrategy::Exec(s) => s.name(),
            BenchStrategy::SignExtendPairs => "sign-extend-pairs",
        }
    }

    fn parse_list(s: &str, kernel: BenchKernel) -> CliResult<Vec<BenchStrategy>> {
        let all_exec = Strategy::ALL.iter().map(|&s| BenchStrategy::Exec(s));
        match s.to_ascii_lowercase().as_str() {
            "all" if kernel == BenchKernel::Matmul => Ok(all_exec.chain([BenchStrategy::SignExtendPairs]).collect()),
            "all" => Ok(all_exec.collect()),
            "sign-extend-pairs" | "smlad" if kernel == BenchKernel::Matmul => Ok(vec![BenchStrategy::SignExtendPairs]),
            "sign-extend-pairs" | "smlad" => Err(CliError::Usage("sign-extend-pairs applies to matmul only".into())),
            other => Ok(vec![BenchStrategy::Exec(other.parse().map_err(CliError::Usage)?)]),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value = "matmul")]
    pub kernel: BenchKernel,
    /// naive, transposed-b, packed-dot, sign-extend-pairs or all.
    #[arg(long, default_value = "packed-dot")]
    pub strategy: String,
    /// matmul MxKxN, conv HxWxCxOxK, squash RxD, softmax GxN, caps OxIxODxID.
    #[arg(long)]
    pub dims: Option<String>,
    #[arg(long, default_value_t = 100)]
    pub iters: usize,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, value_enum, default_value = "height")]
    pub conv_partition: PartitionArg,
    /// Output shift for matmul and conv.
    #[arg(long, default_value_t = 7)]
    pub shift: u32,
    /// Routing iterations for the caps kernel.
    #[arg(long, default_value_t = 3)]
    pub routings: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the CSV report to this file.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchRow {
    pub kernel: String,
    pub strategy: String,
    pub dims: String,
    pub iterations: usize,
    pub workers: usize,
    pub macs: u64,
    pub wall_ns: u128,
    pub checksum: String,
}

impl BenchRow {
    pub fn ns_per_mac(&self) -> f64 {
        if self.macs == 0 {
            0.0
        } else {
            self.wall_ns as f64 / self.macs as f64
        }
    }
}

impl fmt::Display for BenchRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{BENCH_SCHEMA},{},{},{},{},{},{},{},{:.4},{}",
            self.kernel,
            self.strategy,
            self.dims,
            self.iterations,
            self.workers,
            self.macs,
            self.wall_ns,
            self.ns_per_mac(),
            self.checksum
        )
    }
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{BENCH_CSV_HEADER}")?;
        for r in &self.rows {
            writeln!(f, "{r}")?;
        }
        Ok(())
    }
}

fn random_q7(rng: &mut ChaCha8Rng, len: usize) -> Vec<Q7> {
    (0..len).map(|_| rng.random::<i8>()).collect()
}

/// Times `iters` calls of `f`, returning wall time and the last output.
fn time<F: FnMut() -> CliResult<Vec<Q7>>>(iters: usize, mut f: F) -> CliResult<(u128, Vec<Q7>)> {
    let start = Instant::now();
    let mut out = vec![];
    for _ in 0..iters {
        out = f()?;
    }
    Ok((start.elapsed().as_nanos(), out))
}

pub fn cmd_bench(a: &BenchArgs) -> CliResult<BenchReport> {
    if a.iters == 0 || a.workers == 0 {
        return Err(CliError::Usage("--iters and --workers must be at least 1".into()));
    }
    if a.shift > 31 {
        return Err(CliError::Usage("--shift must be in 0..=31".into()));
    }
    let (default, count) = a.kernel.default_dims();
    let dims_text = a.dims.clone().unwrap_or_else(|| default.to_string());
    let d = parse_dims(&dims_text, count)?;
    let strategies = BenchStrategy::parse_list(&a.strategy, a.kernel)?;
    let iters = a.iters as u64;
    let mut rows = vec![];
    for strategy in strategies {
        let exec = match strategy {
            BenchStrategy::Exec(s) => ExecConfig::new(s, a.workers),
            BenchStrategy::SignExtendPairs => ExecConfig::new(Strategy::Naive, 1),
        }
        .with_conv_partition(a.conv_partition.into());
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        let (macs, (wall_ns, out)) = match a.kernel {
            BenchKernel::Matmul => {
                let (m, k, n) = (d[0], d[1], d[2]);
                let x = QMatrix::new(random_q7(&mut rng, m * k), m, k, QFormat::Q0_7)?;
                let y = QMatrix::new(random_q7(&mut rng, k * n), k, n, QFormat::Q0_7)?;
                let run = time(a.iters, || {
                    Ok(match strategy {
                        BenchStrategy::Exec(_) => mat_mult_exec(&x, &y, a.shift, &exec)?.data,
                        BenchStrategy::SignExtendPairs => mat_mult_sign_extend_pairs(&x, &y, a.shift)?.data,
                    })
                })?;
                ((m * k * n) as u64 * iters, run)
            }
            BenchKernel::Conv => {
                let (h, w, c, o, k) = (d[0], d[1], d[2], d[3], d[4]);
                let p = ConvParams {
                    in_h: h,
                    in_w: w,
                    in_c: c,
                    out_c: o,
                    kernel_h: k,
                    kernel_w: k,
                    stride_h: 1,
                    stride_w: 1,
                    pad_h: 0,
                    pad_w: 0,
                    bias_shift: 0,
                    out_shift: a.shift,
                };
                p.validate()?;
                let x = QTensor::new(random_q7(&mut rng, h * w * c), h, w, c, QFormat::Q0_7)?;
                let wts = random_q7(&mut rng, p.weight_len());
                let bias = random_q7(&mut rng, o);
                let run = time(a.iters, || {
                    let y = conv2d_hwc_exec(
                        &x,
                        &wts,
                        &bias,
                        &p,
                        true,
                        QFormat::Q0_7,
                        exec.workers,
                        exec.conv_partition,
                    )?;
                    Ok(y.data)
                })?;
                ((p.out_h() * p.out_w() * o * k * k * c) as u64 * iters, run)
            }
            BenchKernel::Squash => {
                let (r, dim) = (d[0], d[1]);
                let x = random_q7(&mut rng, r * dim);
                let run = time(a.iters, || {
                    let mut out = vec![0; x.len()];
                    squash_rows(&x, dim, 7, exec.workers, &mut out);
                    Ok(out)
                })?;
                ((r * dim) as u64 * iters, run)
            }
            BenchKernel::Softmax => {
                let (g, n) = (d[0], d[1]);
                let x = random_q7(&mut rng, g * n);
                let run = time(a.iters, || Ok(softmax_q7(&x, g, 5)?))?;
                ((g * n) as u64 * iters, run)
            }
            BenchKernel::Caps => {
                let (o, i, od, id) = (d[0], d[1], d[2], d[3]);
                let r = a.routings;
                if r == 0 {
                    return Err(CliError::Usage("--routings must be at least 1".into()));
                }
                let mut shifts = CapsShifts::zeros(r);
                shifts.inputs_hat_shift = 7;
                shifts.caps_output_shift = vec![7; r];
                shifts.agreement_mul_shift = vec![7; r - 1];
                let desc = CapsLayerDesc {
                    in_caps: i,
                    in_dim: id,
                    out_caps: o,
                    out_dim: od,
                    num_routings: r,
                    weights: random_q7(&mut rng, o * i * od * id),
                    shifts,
                };
                let x = QMatrix::new(random_q7(&mut rng, i * id), i, id, QFormat::Q0_7)?;
                let run = time(a.iters, || Ok(capsule_layer_q7(&x, &desc, &exec)?.data))?;
                let per = o * i * od * id + r * o * i * od + (r - 1) * o * i * od;
                (per as u64 * iters, run)
            }
        };
        rows.push(BenchRow {
            kernel: a.kernel.name().into(),
            strategy: match a.kernel {
                BenchKernel::Matmul | BenchKernel::Caps => strategy.name().into(),
                _ => "auto".into(),
            },
            dims: dims_text.clone(),
            iterations: a.iters,
            workers: exec.workers,
            macs,
            wall_ns,
            checksum: sha256_hex(&out.iter().map(|&v| v as u8).collect::<Vec<_>>()),
        });
        if !matches!(a.kernel, BenchKernel::Matmul | BenchKernel::Caps) {
            break;
        }
    }
    let report = BenchReport { rows };
    if let Some(path) = &a.csv {
        std::fs::write(path, report.to_string()).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
    }
    Ok(report)
}
