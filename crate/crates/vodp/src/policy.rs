//! DDPM action head: cosine noise scheduler, forward noising, the
//! temporal-conv noise prediction network with feature-wise conditioning,
//! the denoising step, and full reverse sampling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{dims3, Conv1d, GraphParams, Init, Linear, ParamStore};
use crate::tensor::{Scalar, Tape, ValueId};

/// Diffusion constants for k = 1..=K. `alpha_bar` has an extra index 0
/// entry fixed at 1 (the empty product), which also makes the posterior
/// variance vanish at k = 1 so the final denoising step is deterministic.
#[derive(Debug, Clone)]
pub struct Scheduler {
    pub k_steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

const BETA_MIN: f64 = 1e-4;
const BETA_MAX: f64 = 0.999;

/// Cosine-squared schedule, beta clipped to [1e-4, 0.999].
pub fn make_scheduler(k_steps: usize) -> Result<Scheduler> {
    if k_steps < 2 {
        return Err(Error::Config(format!("scheduler needs K >= 2, got {k_steps}")));
    }
    let s = 0.008;
    let curve = |t: f64| ((t + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    let mut beta = vec![0.0; k_steps + 1];
    let mut alpha = vec![0.0; k_steps + 1];
    let mut alpha_bar = vec![1.0; k_steps + 1];
    let mut sigma = vec![0.0; k_steps + 1];
    for k in 1..=k_steps {
        let b = 1.0 - curve(k as f64 / k_steps as f64) / curve((k - 1) as f64 / k_steps as f64);
        beta[k] = b.clamp(BETA_MIN, BETA_MAX);
        alpha[k] = 1.0 - beta[k];
        alpha_bar[k] = alpha_bar[k - 1] * alpha[k];
    }
    for k in 1..=k_steps {
        // posterior variance beta_tilde = (1 - abar_{k-1}) / (1 - abar_k) * beta_k
        sigma[k] = ((1.0 - alpha_bar[k - 1]) / (1.0 - alpha_bar[k]) * beta[k]).sqrt();
    }
    Ok(Scheduler { k_steps, beta, alpha, alpha_bar, sigma })
}

impl Scheduler {
    pub fn beta(&self, k: usize) -> f64 {
        assert!((1..=self.k_steps).contains(&k), "k {k} out of 1..={}", self.k_steps);
        self.beta[k]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        assert!((1..=self.k_steps).contains(&k));
        self.alpha[k]
    }

    /// Cumulative product; index 0 is defined as 1.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        assert!(k <= self.k_steps);
        self.alpha_bar[k]
    }

    /// Posterior noise scale; zero at k = 1.
    pub fn sigma(&self, k: usize) -> f64 {
        assert!((1..=self.k_steps).contains(&k));
        self.sigma[k]
    }

    /// The per-step rescale 1/sqrt(alpha_k).
    pub fn step_scale(&self, k: usize) -> f64 {
        1.0 / self.alpha(k).sqrt()
    }

    /// The per-step noise coefficient beta_k / sqrt(1 - alpha_bar_k).
    pub fn noise_coef(&self, k: usize) -> f64 {
        self.beta(k) / (1.0 - self.alpha_bar(k)).sqrt()
    }
}

/// Forward noising: a_k = sqrt(abar_k) a0 + sqrt(1 - abar_k) eps.
pub fn add_noise<S: Scalar>(sched: &Scheduler, a0: &[S], eps: &[S], k: usize) -> Vec<S> {
    let ab = sched.alpha_bar(k);
    let ca = S::from_f64(ab.sqrt());
    let ce = S::from_f64((1.0 - ab).sqrt());
    a0.iter().zip(eps).map(|(&a, &e)| ca * a + ce * e).collect()
}

/// One reverse step: a_{k-1} = (a_k - gamma_k eps_pred) / sqrt(alpha_k) + sigma_k z.
/// The noise draw is skipped at k = 1 (sigma is zero there).
pub fn denoise_step<S: Scalar>(
    sched: &Scheduler,
    a_k: &[S],
    eps_pred: &[S],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<S>> {
    if k < 1 || k > sched.k_steps {
        return Err(Error::Config(format!("denoise step k={k} outside 1..={}", sched.k_steps)));
    }
    let scale = S::from_f64(sched.step_scale(k));
    let gamma = S::from_f64(sched.noise_coef(k));
    let mut out: Vec<S> = a_k.iter().zip(eps_pred).map(|(&a, &e)| (a - gamma * e) * scale).collect();
    if k > 1 {
        let sigma = sched.sigma(k);
        for v in out.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += S::from_f64(sigma * z);
        }
    }
    Ok(out)
}

/// Sinusoidal embedding of diffusion step indices, (B, dim).
pub fn k_embedding<S: Scalar>(ks: &[usize], dim: usize) -> Vec<S> {
    assert!(dim >= 4 && dim % 2 == 0, "k embedding dim must be even and >= 4");
    let half = dim / 2;
    let mut out = Vec::with_capacity(ks.len() * dim);
    for &k in ks {
        for i in 0..half {
            let freq = (-(10000.0f64).ln() * i as f64 / (half - 1) as f64).exp();
            out.push(S::from_f64((k as f64 * freq).sin()));
        }
        for i in 0..half {
            let freq = (-(10000.0f64).ln() * i as f64 / (half - 1) as f64).exp();
            out.push(S::from_f64((k as f64 * freq).cos()));
        }
    }
    out
}

/// Temporal conv encoder-decoder over the action horizon (N -> N/2 -> N/4),
/// each level modulated by a feature-wise affine computed from the
/// conditioning vector (flattened scene features ++ step embedding). The
/// output head is zero-initialized so the untrained net predicts zero noise.
pub struct NoiseNet {
    e1: Conv1d,
    f1: Linear,
    e2: Conv1d,
    f2: Linear,
    mid: Conv1d,
    fm: Linear,
    d2: Conv1d,
    g2: Linear,
    d1: Conv1d,
    g1: Linear,
    head: Conv1d,
    pub width: usize,
    pub cond_dim: usize,
    pub joints: usize,
}

impl NoiseNet {
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        joints: usize,
        width: usize,
        cond_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = width;
        let film = |store: &mut ParamStore<S>, name: &str, rng: &mut ChaCha8Rng| {
            Linear::register(store, name, cond_dim, 2 * w, true, Init::Xavier, rng)
        };
        let net = NoiseNet {
            e1: Conv1d::register(store, "noise.e1", joints, w, 3, 1, Init::He, rng),
            f1: film(store, "noise.f1", rng),
            e2: Conv1d::register(store, "noise.e2", w, w, 3, 1, Init::He, rng),
            f2: film(store, "noise.f2", rng),
            mid: Conv1d::register(store, "noise.mid", w, w, 3, 1, Init::He, rng),
            fm: film(store, "noise.fm", rng),
            d2: Conv1d::register(store, "noise.d2", 2 * w, w, 3, 1, Init::He, rng),
            g2: film(store, "noise.g2", rng),
            d1: Conv1d::register(store, "noise.d1", 2 * w, w, 3, 1, Init::He, rng),
            g1: film(store, "noise.g1", rng),
            head: Conv1d::register(store, "noise.head", w, joints, 1, 0, Init::Zeros, rng),
            width: w,
            cond_dim,
            joints,
        };
        net
    }

    fn film<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        gp: &mut GraphParams<S>,
        x: ValueId,
        lin: &Linear,
        cond: ValueId,
        one: ValueId,
    ) -> Result<ValueId> {
        let (b, ch, _n) = dims3("film", tape.shape(x))?;
        let sb = lin.apply(tape, gp, cond)?;
        let scale = tape.slice(sb, 1, 0, ch)?;
        let shift = tape.slice(sb, 1, ch, ch)?;
        let scale = tape.add(scale, one)?;
        let scale = tape.reshape(scale, vec![b, ch, 1])?;
        let shift = tape.reshape(shift, vec![b, ch, 1])?;
        let y = tape.mul(x, scale)?;
        tape.add(y, shift)
    }

    /// `actions` (B, N, J) with N divisible by 4; `cond` (B, cond_dim).
    pub fn apply<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        gp: &mut GraphParams<S>,
        actions: ValueId,
        cond: ValueId,
    ) -> Result<ValueId> {
        let (b, n, j) = dims3("noise_net", tape.shape(actions))?;
        if n % 4 != 0 {
            return Err(Error::Geometry { op: "noise_net", detail: format!("horizon {n} not divisible by 4") });
        }
        if j != self.joints {
            return Err(Error::ShapeMismatch { op: "noise_net", lhs: vec![b, n, j], rhs: vec![self.joints] });
        }
        let one = tape.leaf(vec![S::ONE], vec![1])?;
        let x = tape.permute(actions, &[0, 2, 1])?; // (B, J, N)

        let h1 = self.e1.apply(tape, gp, x)?;
        let h1 = self.film(tape, gp, h1, &self.f1, cond, one)?;
        let h1 = tape.gelu(h1)?; // (B, W, N)

        let h2 = tape.avg_pool_1d(h1)?;
        let h2 = self.e2.apply(tape, gp, h2)?;
        let h2 = self.film(tape, gp, h2, &self.f2, cond, one)?;
        let h2 = tape.gelu(h2)?; // (B, W, N/2)

        let h3 = tape.avg_pool_1d(h2)?;
        let h3 = self.mid.apply(tape, gp, h3)?;
        let h3 = self.film(tape, gp, h3, &self.fm, cond, one)?;
        let h3 = tape.gelu(h3)?; // (B, W, N/4)

        let u2 = tape.upsample_nearest_1d(h3)?;
        let u2 = tape.concat(&[u2, h2], 1)?;
        let u2 = self.d2.apply(tape, gp, u2)?;
        let u2 = self.film(tape, gp, u2, &self.g2, cond, one)?;
        let u2 = tape.gelu(u2)?; // (B, W, N/2)

        let u1 = tape.upsample_nearest_1d(u2)?;
        let u1 = tape.concat(&[u1, h1], 1)?;
        let u1 = self.d1.apply(tape, gp, u1)?;
        let u1 = self.film(tape, gp, u1, &self.g1, cond, one)?;
        let u1 = tape.gelu(u1)?; // (B, W, N)

        let out = self.head.apply(tape, gp, u1)?; // (B, J, N)
        tape.permute(out, &[0, 2, 1])
    }
}

/// Builds the conditioning vector [h_sc_flat ++ k_embedding] on the tape.
pub fn conditioning<S: Scalar>(
    tape: &mut Tape<S>,
    h_sc_flat: ValueId,
    ks: &[usize],
    k_embed_dim: usize,
) -> Result<ValueId> {
    let b = tape.shape(h_sc_flat)[0];
    debug_assert_eq!(b, ks.len());
    let emb = k_embedding::<S>(ks, k_embed_dim);
    let emb = tape.leaf(emb, vec![b, k_embed_dim])?;
    tape.concat(&[h_sc_flat, emb], 1)
}

/// Training objective: per batch element sample k uniform in [1, K] and
/// standard-normal eps, noise the target chunk, and take the MSE between
/// the injected and predicted noise. Drawing and noising happen outside the
/// tape; the loss node is differentiable w.r.t. the network and everything
/// upstream of `h_sc_flat`.
pub struct DiffusionBatch<S> {
    pub ks: Vec<usize>,
    pub eps: Vec<S>,
    pub noisy: Vec<S>,
}

pub fn draw_diffusion_batch<S: Scalar>(
    sched: &Scheduler,
    a0: &[S],
    batch: usize,
    horizon: usize,
    joints: usize,
    rng: &mut ChaCha8Rng,
) -> DiffusionBatch<S> {
    debug_assert_eq!(a0.len(), batch * horizon * joints);
    let chunk = horizon * joints;
    let mut ks = Vec::with_capacity(batch);
    let mut eps = Vec::with_capacity(a0.len());
    let mut noisy = Vec::with_capacity(a0.len());
    for bi in 0..batch {
        let k = rng.random_range(1..=sched.k_steps);
        ks.push(k);
        let a_slice = &a0[bi * chunk..(bi + 1) * chunk];
        let e: Vec<S> = (0..chunk)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                S::from_f64(z)
            })
            .collect();
        noisy.extend(add_noise(sched, a_slice, &e, k));
        eps.extend(e);
    }
    DiffusionBatch { ks, eps, noisy }
}

pub fn diffusion_loss<S: Scalar>(
    tape: &mut Tape<S>,
    gp: &mut GraphParams<S>,
    net: &NoiseNet,
    h_sc_flat: ValueId,
    batch: &DiffusionBatch<S>,
    horizon: usize,
    k_embed_dim: usize,
) -> Result<ValueId> {
    let b = batch.ks.len();
    let j = net.joints;
    let noisy = tape.leaf(batch.noisy.clone(), vec![b, horizon, j])?;
    let eps = tape.leaf(batch.eps.clone(), vec![b, horizon, j])?;
    let cond = conditioning(tape, h_sc_flat, &batch.ks, k_embed_dim)?;
    let pred = net.apply(tape, gp, noisy, cond)?;
    tape.mse(pred, eps)
}

/// Full reverse chain for one conditioning vector: a_K ~ N(0, I), K..1
/// denoising steps, final chunk clamped to [-1, 1] (normalized action
/// space). Deterministic given the rng stream.
pub fn sample_chunk<S: Scalar>(
    tape: &mut Tape<S>,
    gp: &mut GraphParams<S>,
    net: &NoiseNet,
    sched: &Scheduler,
    h_sc_flat: ValueId,
    horizon: usize,
    k_embed_dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<S>> {
    let j = net.joints;
    let mut a: Vec<S> = (0..horizon * j)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            S::from_f64(z)
        })
        .collect();
    for k in (1..=sched.k_steps).rev() {
        let a_leaf = tape.leaf(a.clone(), vec![1, horizon, j])?;
        let cond = conditioning(tape, h_sc_flat, &[k], k_embed_dim)?;
        let pred = net.apply(tape, gp, a_leaf, cond)?;
        let eps_pred = tape.data(pred).to_vec();
        a = denoise_step(sched, &a, &eps_pred, k, rng)?;
    }
    let lo = S::from_f64(-1.0);
    let hi = S::ONE;
    for v in a.iter_mut() {
        *v = (*v).max(lo).min(hi);
    }
    Ok(a)
}
