use super::config::ModelConfig;
use crate::numerics::{Matrix, Real, SeededRng};

/// Weights of one DiT block. Linear maps are stored `in x out`; biases are
/// `1 x out` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T = f32> {
    pub wq: Matrix<T>,
    pub bq: Matrix<T>,
    pub wk: Matrix<T>,
    pub bk: Matrix<T>,
    pub wv: Matrix<T>,
    pub bv: Matrix<T>,
    pub wo: Matrix<T>,
    pub bo: Matrix<T>,
    pub mlp_w1: Matrix<T>,
    pub mlp_b1: Matrix<T>,
    pub mlp_w2: Matrix<T>,
    pub mlp_b2: Matrix<T>,
    /// Timestep modulation projector, `hidden x 6*hidden`. Output columns are
    /// `[shift_a, scale_a, gate_a, shift_m, scale_m, gate_m]`.
    pub ada_w: Matrix<T>,
    pub ada_b: Matrix<T>,
}

/// Column blocks of the modulation vector.
pub(crate) const SHIFT_A: usize = 0;
pub(crate) const SCALE_A: usize = 1;
pub(crate) const GATE_A: usize = 2;
pub(crate) const SHIFT_M: usize = 3;
pub(crate) const SCALE_M: usize = 4;
pub(crate) const GATE_M: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    pub token_embed: Matrix<T>,
    pub in_w: Matrix<T>,
    pub in_b: Matrix<T>,
    pub time_w1: Matrix<T>,
    pub time_b1: Matrix<T>,
    pub time_w2: Matrix<T>,
    pub time_b2: Matrix<T>,
    pub layers: Vec<LayerParams<T>>,
    pub out_w: Matrix<T>,
    pub out_b: Matrix<T>,
}

/// How the modulation gate columns start out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateInit {
    /// adaLN-zero: every block starts as the identity map.
    Zero,
    /// Gaussian gates with the given standard deviation; used to probe a
    /// random network whose blocks actually mix information.
    Random(f32),
}

fn gaussian_matrix(rng: &mut SeededRng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| (rng.next_gaussian() * std) as f32)
}

fn fan_in_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> Matrix {
    gaussian_matrix(rng, rows, cols, 1.0 / (rows as f64).sqrt())
}

impl LayerParams<f32> {
    fn init(config: &ModelConfig, rng: &mut SeededRng, gates: GateInit) -> Self {
        let h = config.hidden_dim;
        let m = config.mlp_dim();
        let mut ada_w = fan_in_matrix(rng, h, 6 * h);
        let mut ada_b = Matrix::zeros(1, 6 * h);
        for block in [GATE_A, GATE_M] {
            for i in 0..h {
                for j in block * h..(block + 1) * h {
                    let v = match gates {
                        GateInit::Zero => 0.0,
                        GateInit::Random(std) => (rng.next_gaussian() * std as f64) as f32,
                    };
                    ada_w.set(i, j, v);
                }
            }
            if let GateInit::Random(std) = gates {
                for j in block * h..(block + 1) * h {
                    ada_b.set(0, j, (rng.next_gaussian() * std as f64) as f32);
                }
            }
        }
        Self {
            wq: fan_in_matrix(rng, h, h),
            bq: Matrix::zeros(1, h),
            wk: fan_in_matrix(rng, h, h),
            bk: Matrix::zeros(1, h),
            wv: fan_in_matrix(rng, h, h),
            bv: Matrix::zeros(1, h),
            wo: fan_in_matrix(rng, h, h),
            bo: Matrix::zeros(1, h),
            mlp_w1: fan_in_matrix(rng, h, m),
            mlp_b1: Matrix::zeros(1, m),
            mlp_w2: fan_in_matrix(rng, m, h),
            mlp_b2: Matrix::zeros(1, h),
            ada_w,
            ada_b,
        }
    }
}

impl ModelParams<f32> {
    /// Seeded initialization: weights drawn with std `1/sqrt(fan_in)`, biases
    /// zero, modulation gates zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        Self::init_with(config, seed, GateInit::Zero)
    }

    pub fn init_with(config: &ModelConfig, seed: u64, gates: GateInit) -> Self {
        let root = SeededRng::new(seed, 0);
        let h = config.hidden_dim;
        let mut rng = root.fork(1);
        let token_embed = gaussian_matrix(&mut rng, config.token_vocab, config.token_embed_dim, 1.0);
        let in_dim = config.feature_dim + config.cond_dim();
        let in_w = fan_in_matrix(&mut rng, in_dim, h);
        let time_w1 = fan_in_matrix(&mut rng, h, h);
        let time_w2 = fan_in_matrix(&mut rng, h, h);
        let out_w = fan_in_matrix(&mut rng, h, config.feature_dim);
        let layers = (0..config.layers)
            .map(|l| LayerParams::init(config, &mut root.fork(100 + l as u64), gates))
            .collect();
        Self {
            token_embed,
            in_w,
            in_b: Matrix::zeros(1, h),
            time_w1,
            time_b1: Matrix::zeros(1, h),
            time_w2,
            time_b2: Matrix::zeros(1, h),
            layers,
            out_w,
            out_b: Matrix::zeros(1, config.feature_dim),
        }
    }
}

impl<T: Real> ModelParams<T> {
    /// Tensors in canonical order; matches [`ModelParams::names`].
    pub fn tensors(&self) -> Vec<&Matrix<T>> {
        let mut out = vec![
            &self.token_embed,
            &self.in_w,
            &self.in_b,
            &self.time_w1,
            &self.time_b1,
            &self.time_w2,
            &self.time_b2,
        ];
        for l in &self.layers {
            out.extend([
                &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo, &l.mlp_w1, &l.mlp_b1,
                &l.mlp_w2, &l.mlp_b2, &l.ada_w, &l.ada_b,
            ]);
        }
        out.extend([&self.out_w, &self.out_b]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out = vec![
            &mut self.token_embed,
            &mut self.in_w,
            &mut self.in_b,
            &mut self.time_w1,
            &mut self.time_b1,
            &mut self.time_w2,
            &mut self.time_b2,
        ];
        for l in &mut self.layers {
            out.extend([
                &mut l.wq,
                &mut l.bq,
                &mut l.wk,
                &mut l.bk,
                &mut l.wv,
                &mut l.bv,
                &mut l.wo,
                &mut l.bo,
                &mut l.mlp_w1,
                &mut l.mlp_b1,
                &mut l.mlp_w2,
                &mut l.mlp_b2,
                &mut l.ada_w,
                &mut l.ada_b,
            ]);
        }
        out.extend([&mut self.out_w, &mut self.out_b]);
        out
    }

    /// Canonical tensor names, `layer{i}.{attn|mlp|adaln}.{name}` inside blocks.
    pub fn names(layers: usize) -> Vec<String> {
        let mut out: Vec<String> = [
            "token_embed.weight",
            "in_proj.weight",
            "in_proj.bias",
            "time.fc1.weight",
            "time.fc1.bias",
            "time.fc2.weight",
            "time.fc2.bias",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for i in 0..layers {
            for (group, name) in [
                ("attn", "wq"),
                ("attn", "bq"),
                ("attn", "wk"),
                ("attn", "bk"),
                ("attn", "wv"),
                ("attn", "bv"),
                ("attn", "wo"),
                ("attn", "bo"),
                ("mlp", "w1"),
                ("mlp", "b1"),
                ("mlp", "w2"),
                ("mlp", "b2"),
                ("adaln", "weight"),
                ("adaln", "bias"),
            ] {
                out.push(format!("layer{i}.{group}.{name}"));
            }
        }
        out.push("out_proj.weight".into());
        out.push("out_proj.bias".into());
        out
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix<T>| Matrix::zeros(m.rows(), m.cols());
        Self {
            token_embed: z(&self.token_embed),
            in_w: z(&self.in_w),
            in_b: z(&self.in_b),
            time_w1: z(&self.time_w1),
            time_b1: z(&self.time_b1),
            time_w2: z(&self.time_w2),
            time_b2: z(&self.time_b2),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    wq: z(&l.wq),
                    bq: z(&l.bq),
                    wk: z(&l.wk),
                    bk: z(&l.bk),
                    wv: z(&l.wv),
                    bv: z(&l.bv),
                    wo: z(&l.wo),
                    bo: z(&l.bo),
                    mlp_w1: z(&l.mlp_w1),
                    mlp_b1: z(&l.mlp_b1),
                    mlp_w2: z(&l.mlp_w2),
                    mlp_b2: z(&l.mlp_b2),
                    ada_w: z(&l.ada_w),
                    ada_b: z(&l.ada_b),
                })
                .collect(),
            out_w: z(&self.out_w),
            out_b: z(&self.out_b),
        }
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U> {
            token_embed: self.token_embed.cast(),
            in_w: self.in_w.cast(),
            in_b: self.in_b.cast(),
            time_w1: self.time_w1.cast(),
            time_b1: self.time_b1.cast(),
            time_w2: self.time_w2.cast(),
            time_b2: self.time_b2.cast(),
            layers: Vec::new(),
            out_w: self.out_w.cast(),
            out_b: self.out_b.cast(),
        };
        out.layers = self
            .layers
            .iter()
            .map(|l| LayerParams {
                wq: l.wq.cast(),
                bq: l.bq.cast(),
                wk: l.wk.cast(),
                bk: l.bk.cast(),
                wv: l.wv.cast(),
                bv: l.bv.cast(),
                wo: l.wo.cast(),
                bo: l.bo.cast(),
                mlp_w1: l.mlp_w1.cast(),
                mlp_b1: l.mlp_b1.cast(),
                mlp_w2: l.mlp_w2.cast(),
                mlp_b2: l.mlp_b2.cast(),
                ada_w: l.ada_w.cast(),
                ada_b: l.ada_b.cast(),
            })
            .collect();
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|m| m.len()).sum()
    }

    /// Adds `other` into `self`, tensor by tensor.
    pub fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    /// Flat view used for coordinate sampling: `(tensor index, element index)`.
    pub fn coordinate(&self, flat: usize) -> (usize, usize) {
        let mut rest = flat;
        for (t, m) in self.tensors().iter().enumerate() {
            if rest < m.len() {
                return (t, rest);
            }
            rest -= m.len();
        }
        panic!("coordinate {flat} out of range");
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|m| m.all_finite())
    }
}

impl LayerParams<f32> {
    /// Values of the gate columns (weights and biases) of the modulation projector.
    pub fn gate_values(&self) -> Vec<f32> {
        let h = self.ada_w.rows();
        let mut out = Vec::new();
        for block in [GATE_A, GATE_M] {
            for i in 0..h {
                out.extend_from_slice(&self.ada_w.row(i)[block * h..(block + 1) * h]);
            }
            out.extend_from_slice(&self.ada_b.row(0)[block * h..(block + 1) * h]);
        }
        out
    }
}

impl ModelParams<f32> {
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .all(|(a, b)| a.bits_eq(b))
    }
}
