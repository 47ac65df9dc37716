//! The DualSSM block: input projection, depthwise convolution, parallel
//! global/local 2-D scans, dual attention fusion (DAF), multiplicative
//! gating, output projection, and residual. Ablation variants swap or drop
//! the scan branches and rewire the attention aggregators.

use crate::scan2d::{global_scan, local_scan, ScanMode, WindowGrid};
use crate::ssm::SelectiveSsm;
use crate::tensor::{Reduce, Tensor};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockVariant {
    Dual,
    GlobalOnly,
    LocalOnly,
}

/// Which attention aggregator each stream passes through.
/// Channel attention = "Channel Aggregator"; spatial attention = "Token
/// Aggregator".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assignment {
    /// Global → channel, local → token (the default design).
    Gclt,
    /// Both streams through channel then token.
    Gltc,
    /// Global → token, local → channel.
    Gtlc,
}

impl std::str::FromStr for Assignment {
    type Err = String;
    fn from_str(s: &str) -> Result<Assignment, String> {
        match s.to_ascii_uppercase().as_str() {
            "GCLT" => Ok(Assignment::Gclt),
            "GLTC" => Ok(Assignment::Gltc),
            "GTLC" => Ok(Assignment::Gtlc),
            other => Err(format!("unknown aggregator assignment {other}")),
        }
    }
}

impl std::str::FromStr for BlockVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<BlockVariant, String> {
        match s {
            "dual" => Ok(BlockVariant::Dual),
            "global_only" => Ok(BlockVariant::GlobalOnly),
            "local_only" => Ok(BlockVariant::LocalOnly),
            other => Err(format!("unknown scan variant {other}")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DualSsmBlockConfig {
    /// Block channel width C; the inner SSM/conv path runs at 2C.
    pub c: usize,
    /// Window side for the local scan.
    pub m: usize,
    /// Channel-attention reduction ratio.
    pub r: usize,
    /// State size of each SSM lane.
    pub d_state: usize,
    /// Low-rank width of the Δ generator.
    pub dt_rank: usize,
    pub variant: BlockVariant,
    pub assignment: Assignment,
}

impl DualSsmBlockConfig {
    pub fn inner(&self) -> usize {
        2 * self.c
    }
}

/// Channel attention: w_c = σ(MLP(u_avg) + MLP(u_max)) with a shared
/// two-layer bottleneck MLP, broadcast-multiplied over spatial positions.
pub struct ChannelAttention {
    pub w1: Tensor,
    pub w2: Tensor,
}

impl ChannelAttention {
    pub fn new(d: usize, r: usize, rng: &mut impl Rng) -> ChannelAttention {
        assert_eq!(d % r, 0, "channel width {d} not divisible by reduction {r}");
        let hidden = d / r;
        let s1 = 1.0 / (d as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        ChannelAttention {
            w1: Tensor::param(&[d, hidden], (0..d * hidden).map(|_| rng.gen_range(-s1..s1)).collect()),
            w2: Tensor::param(&[hidden, d], (0..hidden * d).map(|_| rng.gen_range(-s2..s2)).collect()),
        }
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.w1.clone(), self.w2.clone()]
    }

    fn mlp(&self, u: &Tensor) -> Tensor {
        u.linear(&self.w1, None).relu().linear(&self.w2, None)
    }

    pub fn forward(&self, y: &Tensor) -> Tensor {
        assert_eq!(y.shape().len(), 4, "channel attention expects [B,H,W,D]");
        let u_avg = y.reduce(Reduce::Mean, &[1, 2], true);
        let u_max = y.reduce(Reduce::Max, &[1, 2], true);
        let w_c = self.mlp(&u_avg).add(&self.mlp(&u_max)).sigmoid();
        y.mul(&w_c)
    }
}

/// Spatial attention: channel-wise avg/max maps, a 7×7 same-padding conv to
/// one channel, sigmoid, broadcast-multiplied over channels.
pub struct SpatialAttention {
    pub w: Tensor,
    pub b: Tensor,
}

impl SpatialAttention {
    pub fn new(rng: &mut impl Rng) -> SpatialAttention {
        let s = 1.0 / (7.0 * 7.0 * 2.0f64).sqrt();
        SpatialAttention {
            w: Tensor::param(&[7, 7, 2, 1], (0..98).map(|_| rng.gen_range(-s..s)).collect()),
            b: Tensor::param(&[1], vec![0.0]),
        }
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.w.clone(), self.b.clone()]
    }

    pub fn forward(&self, y: &Tensor) -> Tensor {
        assert_eq!(y.shape().len(), 4, "spatial attention expects [B,H,W,D]");
        let m_avg = y.reduce(Reduce::Mean, &[3], true);
        let m_max = y.reduce(Reduce::Max, &[3], true);
        let m_cat = Tensor::concat_last(&[m_avg, m_max]);
        let m_s = m_cat.conv2d(&self.w, Some(&self.b), 1, 3).sigmoid();
        y.mul(&m_s)
    }
}

/// Dual attention fusion head: the two aggregators plus the post-sum norm.
pub struct Daf {
    pub channel: ChannelAttention,
    pub spatial: SpatialAttention,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
}

impl Daf {
    pub fn new(d: usize, r: usize, rng: &mut impl Rng) -> Daf {
        Daf {
            channel: ChannelAttention::new(d, r, rng),
            spatial: SpatialAttention::new(rng),
            ln_gamma: Tensor::param(&[d], vec![1.0; d]),
            ln_beta: Tensor::param(&[d], vec![0.0; d]),
        }
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut p = self.channel.params();
        p.extend(self.spatial.params());
        p.push(self.ln_gamma.clone());
        p.push(self.ln_beta.clone());
        p
    }

    /// Attended streams before the sum and norm, per the assignment.
    pub fn attend(&self, y_global: &Tensor, y_local: &Tensor, assignment: Assignment) -> (Tensor, Tensor) {
        match assignment {
            Assignment::Gclt => (self.channel.forward(y_global), self.spatial.forward(y_local)),
            Assignment::Gtlc => (self.spatial.forward(y_global), self.channel.forward(y_local)),
            Assignment::Gltc => (
                self.spatial.forward(&self.channel.forward(y_global)),
                self.spatial.forward(&self.channel.forward(y_local)),
            ),
        }
    }

    /// Y_fused = LayerNorm(Y′_global + Y′_local).
    pub fn forward(&self, y_global: &Tensor, y_local: &Tensor, assignment: Assignment) -> Tensor {
        assert_eq!(y_global.shape(), y_local.shape(), "DAF stream shape mismatch");
        let (g, l) = self.attend(y_global, y_local, assignment);
        g.add(&l).layernorm(&self.ln_gamma, &self.ln_beta, 1e-5)
    }
}

/// Branch outputs exposed for the auxiliary heads.
pub struct BlockTaps {
    pub y_global: Option<Tensor>,
    pub y_local: Option<Tensor>,
}

pub struct DualSsmBlock {
    pub cfg: DualSsmBlockConfig,
    /// Pre-norm applied to the block input; the residual skips it.
    pub ln_g: Tensor,
    pub ln_b: Tensor,
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub dw_w: Tensor,
    pub dw_b: Tensor,
    /// Directional SSM of the first branch (global scan, or the stand-in
    /// local scan under the local_only ablation). Shared between the
    /// horizontal and vertical directions.
    pub ssm_a: SelectiveSsm,
    /// Directional SSM of the local branch.
    pub ssm_b: SelectiveSsm,
    pub daf: Daf,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl DualSsmBlock {
    pub fn new(cfg: DualSsmBlockConfig, rng: &mut impl Rng) -> DualSsmBlock {
        let (c, d) = (cfg.c, cfg.inner());
        let s_in = 1.0 / (c as f64).sqrt();
        let s_out = 1.0 / (d as f64).sqrt();
        let s_dw = 1.0 / 3.0;
        DualSsmBlock {
            cfg,
            ln_g: Tensor::param(&[c], vec![1.0; c]),
            ln_b: Tensor::param(&[c], vec![0.0; c]),
            w_in: Tensor::param(&[c, 4 * c], (0..c * 4 * c).map(|_| rng.gen_range(-s_in..s_in)).collect()),
            b_in: Tensor::param(&[4 * c], vec![0.0; 4 * c]),
            dw_w: Tensor::param(&[3, 3, d], (0..9 * d).map(|_| rng.gen_range(-s_dw..s_dw)).collect()),
            dw_b: Tensor::param(&[d], vec![0.0; d]),
            ssm_a: SelectiveSsm::new(d, cfg.d_state, cfg.dt_rank, rng),
            ssm_b: SelectiveSsm::new(d, cfg.d_state, cfg.dt_rank, rng),
            daf: Daf::new(d, cfg.r, rng),
            w_out: Tensor::param(&[d, c], (0..d * c).map(|_| rng.gen_range(-s_out..s_out)).collect()),
            b_out: Tensor::param(&[c], vec![0.0; c]),
        }
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut p = vec![
            self.ln_g.clone(),
            self.ln_b.clone(),
            self.w_in.clone(),
            self.b_in.clone(),
            self.dw_w.clone(),
            self.dw_b.clone(),
        ];
        p.extend(self.ssm_a.params());
        p.extend(self.ssm_b.params());
        p.extend(self.daf.params());
        p.push(self.w_out.clone());
        p.push(self.b_out.clone());
        p
    }

    /// Forward pass. `rng` drives the window selection in train mode; eval
    /// mode scans all windows with the 0.5 expectation scaling and draws
    /// nothing from `rng`.
    pub fn forward(
        &self,
        x: &Tensor,
        mode: ScanMode,
        rng: &mut impl Rng,
    ) -> (Tensor, BlockTaps) {
        let s = x.shape();
        assert_eq!(s.len(), 4, "block expects [B,H,W,C]");
        assert_eq!(s[3], self.cfg.c, "channel width mismatch");
        let (h, w) = (s[1], s[2]);
        let d = self.cfg.inner();

        let xn = x.layernorm(&self.ln_g, &self.ln_b, 1e-5);
        let z = xn.linear(&self.w_in, Some(&self.b_in));
        let ssm_path = z.slice_last(0, d);
        let gate = z.slice_last(d, d);
        let u = ssm_path.conv2d_depthwise(&self.dw_w, Some(&self.dw_b)).silu();

        let mut grid = || match mode {
            ScanMode::Train => WindowGrid::select_random(h, w, self.cfg.m, rng),
            ScanMode::Eval => WindowGrid::all(h, w, self.cfg.m),
        };

        let (y_g, y_l, taps) = match self.cfg.variant {
            BlockVariant::Dual => {
                let g = grid();
                let y_g = global_scan(&u, &self.ssm_a, &self.ssm_a);
                let y_l = local_scan(&u, &self.ssm_b, &self.ssm_b, &g, mode);
                let taps = BlockTaps { y_global: Some(y_g.clone()), y_local: Some(y_l.clone()) };
                (y_g, y_l, taps)
            }
            BlockVariant::GlobalOnly => {
                let y_g = global_scan(&u, &self.ssm_a, &self.ssm_a);
                let y_l = Tensor::zeros(&[s[0], h, w, d]);
                let taps = BlockTaps { y_global: Some(y_g.clone()), y_local: None };
                (y_g, y_l, taps)
            }
            BlockVariant::LocalOnly => {
                let ga = grid();
                let gb = grid();
                let y_g = local_scan(&u, &self.ssm_a, &self.ssm_a, &ga, mode);
                let y_l = local_scan(&u, &self.ssm_b, &self.ssm_b, &gb, mode);
                let taps = BlockTaps { y_global: None, y_local: Some(y_l.clone()) };
                (y_g, y_l, taps)
            }
        };

        let fused = self.daf.forward(&y_g, &y_l, self.cfg.assignment);
        let gated = fused.mul(&gate.silu());
        let out = gated.linear(&self.w_out, Some(&self.b_out)).add(x);
        (out, taps)
    }
}
