//! Diffusion multi-interest generator.
//!
//! A conditional denoising diffusion model over the aggregated interests.
//! For interest `i` the denoiser sees the noisy `r_i` together with the
//! other aggregated interests as context rows (`g₁`) and attends to the
//! interest channel `o_i` (`g₂`) through cross-attention. Training uses the
//! usual noise-prediction objective; sampling perturbs each interest and
//! runs a short reverse chain to produce augmented interests `r*`.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Attention, FeedForward, LayerNorm, Linear};
use crate::numerics::{Matrix, ParamStore, Rng, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DmigConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    #[serde(rename = "T_prime")]
    pub sample_steps: usize,
    pub denoiser_layers: usize,
    pub ffn_width: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DmigConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            sample_steps: 20,
            denoiser_layers: 1,
            ffn_width: 32,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl DmigConfig {
    pub fn validate(&self) -> Result<()> {
        NoiseSchedule::new(self.steps, self.beta_start, self.beta_end)?;
        if self.sample_steps == 0 || self.sample_steps > self.steps {
            return Err(Error::Config(format!(
                "T_prime must be in 1..={}, got {}",
                self.steps, self.sample_steps
            )));
        }
        if self.denoiser_layers == 0 || self.ffn_width == 0 {
            return Err(Error::Config(
                "denoiser_layers and ffn_width must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.steps, self.beta_start, self.beta_end)
    }
}

/// Linear variance schedule; all accessors take `t` in `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!("T must be at least 2, got {steps}")));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| beta_start + i as f64 / (steps - 1) as f64 * (beta_end - beta_start))
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let sigma = beta.iter().map(|b| b.sqrt()).collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Contract(format!(
                "diffusion step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// `√ᾱ_t r₀ + √(1−ᾱ_t) ε`
    pub fn q_sample(&self, r0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_step(t)?;
        let (a, b) = (self.alpha_bar(t).sqrt(), (1.0 - self.alpha_bar(t)).sqrt());
        Ok(r0.iter().zip(eps).map(|(r, e)| a * r + b * e).collect())
    }

    /// One reverse update from `x_t` to `x_{t−1}` given the predicted noise.
    pub fn reverse_step(&self, x: &mut [f64], eps_hat: &[f64], t: usize, z: Option<&[f64]>) {
        let coef = self.beta(t) / (1.0 - self.alpha_bar(t)).sqrt();
        let inv = 1.0 / self.alpha(t).sqrt();
        for (j, v) in x.iter_mut().enumerate() {
            *v = inv * (*v - coef * eps_hat[j]);
            if let Some(z) = z {
                *v += self.sigma(t) * z[j];
            }
        }
    }
}

/// Sinusoidal embedding of a diffusion step.
pub fn timestep_embedding(t: usize, d: usize) -> Vec<f64> {
    let half = d.div_ceil(2);
    let mut out = vec![0.0; d];
    for k in 0..half {
        let freq = 1.0 / 10_000f64.powf(2.0 * k as f64 / d as f64);
        let angle = t as f64 * freq;
        out[2 * k] = angle.sin();
        if 2 * k + 1 < d {
            out[2 * k + 1] = angle.cos();
        }
    }
    out
}

/// Which guidance signals reach the denoiser.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Guidance {
    /// `g₁`: the other aggregated interests as context rows.
    pub context: bool,
    /// `g₂`: cross-attention to the interest channel.
    pub channel: bool,
}

impl Default for Guidance {
    fn default() -> Self {
        Self {
            context: true,
            channel: true,
        }
    }
}

#[derive(Clone, Debug)]
struct DenoiserLayer {
    self_norm: LayerNorm,
    self_attention: Attention,
    cross: Option<(LayerNorm, Attention)>,
    ffn_norm: LayerNorm,
    ffn: FeedForward,
}

/// Pre-norm transformer noise predictor.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub d: usize,
    pub guidance: Guidance,
    time: Linear,
    layers: Vec<DenoiserLayer>,
    final_norm: LayerNorm,
    pub output: Linear,
}

thread_local! {
    static CALLS: Cell<CallCounts> = const { Cell::new(CallCounts { loss: 0, sample: 0 }) };
}

/// Per-thread counts of diffusion loss and sampling invocations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CallCounts {
    pub loss: u64,
    pub sample: u64,
}

pub fn call_counts() -> CallCounts {
    CALLS.with(|c| c.get())
}

fn bump(f: impl FnOnce(&mut CallCounts)) {
    CALLS.with(|c| {
        let mut v = c.get();
        f(&mut v);
        c.set(v);
    });
}

impl Denoiser {
    pub fn new(
        store: &mut ParamStore,
        d: usize,
        config: &DmigConfig,
        guidance: Guidance,
        rng: &mut Rng,
    ) -> Self {
        let layers = (0..config.denoiser_layers)
            .map(|l| {
                let name = format!("dmig.layer{l}");
                DenoiserLayer {
                    self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), d),
                    self_attention: Attention::new(store, &format!("{name}.self_attention"), d, 1, rng),
                    cross: guidance.channel.then(|| {
                        (
                            LayerNorm::new(store, &format!("{name}.cross_norm"), d),
                            Attention::new(store, &format!("{name}.cross_attention"), d, 1, rng),
                        )
                    }),
                    ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d),
                    ffn: FeedForward::new(store, &format!("{name}.ffn"), d, config.ffn_width, rng),
                }
            })
            .collect();
        Self {
            d,
            guidance,
            time: Linear::new(store, "dmig.time", d, d, rng),
            layers,
            final_norm: LayerNorm::new(store, "dmig.final_norm", d),
            output: Linear::new(store, "dmig.output", d, d, rng),
        }
    }

    /// Rows per denoiser group for `c` interests.
    pub fn group_size(&self, c: usize) -> usize {
        if self.guidance.context {
            c
        } else {
            1
        }
    }

    /// Runs the network over `x ((G·n)×d)` where group `g` is at step
    /// `steps[g]` and attends to `channels` row `g`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        steps: &[usize],
        channels: Var,
        n: usize,
    ) -> Result<Var> {
        let d = self.d;
        let mut sin = Matrix::zeros(steps.len(), d);
        for (g, &t) in steps.iter().enumerate() {
            sin.row_mut(g).copy_from_slice(&timestep_embedding(t, d));
        }
        let sin = tape.constant(sin);
        let temb = self.time.forward(tape, store, sin)?;
        let mut h = x;
        for layer in &self.layers {
            h = tape.add_group_rows(h, temb)?;
            let a = layer.self_norm.forward(tape, store, h)?;
            let s = layer.self_attention.forward(tape, store, a, a, n, n)?;
            h = tape.add(h, s)?;
            if let Some((norm, cross)) = &layer.cross {
                let a = norm.forward(tape, store, h)?;
                let s = cross.forward(tape, store, a, channels, n, 1)?;
                h = tape.add(h, s)?;
            }
            let a = layer.ffn_norm.forward(tape, store, h)?;
            let f = layer.ffn.forward(tape, store, a)?;
            h = tape.add(h, f)?;
        }
        let h = self.final_norm.forward(tape, store, h)?;
        self.output.forward(tape, store, h)
    }

    /// Noise prediction for interest `focus` of `rows` (`c×d`, already
    /// holding the noisy row) at step `t`, guided by `channel`.
    pub fn denoise(
        &self,
        store: &ParamStore,
        rows: &Matrix,
        focus: usize,
        t: usize,
        channel: &[f64],
    ) -> Result<Vec<f64>> {
        if rows.cols() != self.d || channel.len() != self.d || focus >= rows.rows() {
            return Err(Error::Dimension {
                op: "denoise",
                left: rows.shape(),
                right: (focus, channel.len()),
            });
        }
        let (x, at) = if self.guidance.context {
            (rows.clone(), focus)
        } else {
            (Matrix::row_vector(rows.row(focus)), 0)
        };
        let n = x.rows();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let ch = tape.constant(Matrix::row_vector(channel));
        let out = self.forward(&mut tape, store, xv, &[t], ch, n)?;
        Ok(tape.value(out).row(at).to_vec())
    }
}

/// Denoiser input for every `(example, interest)` pair: the context rows of
/// `r` with the focus row replaced by `focus_rows`. Returns the stacked
/// groups and the index of each focus row.
fn build_groups(r: &Matrix, focus_rows: &Matrix, c: usize, context: bool) -> (Matrix, Vec<usize>) {
    let pairs = r.rows();
    let d = r.cols();
    if !context {
        return (focus_rows.clone(), (0..pairs).collect());
    }
    let mut x = Matrix::zeros(pairs * c, d);
    let mut focus = Vec::with_capacity(pairs);
    for p in 0..pairs {
        let (b, i) = (p / c, p % c);
        for j in 0..c {
            let src = if j == i { focus_rows.row(p) } else { r.row(b * c + j) };
            x.row_mut(p * c + j).copy_from_slice(src);
        }
        focus.push(p * c + i);
    }
    (x, focus)
}

fn check_inputs(r: &Matrix, o: &Matrix, c: usize, seeds: &[u64]) -> Result<()> {
    if c == 0 || r.rows() != seeds.len() * c || o.shape() != r.shape() {
        return Err(Error::Dimension {
            op: "dmig",
            left: r.shape(),
            right: o.shape(),
        });
    }
    Ok(())
}

/// Noise-prediction loss over a batch.
///
/// `r` and `o` are `(B·c)×d` values (no gradient reaches them); `seeds`
/// holds one stream seed per example. Each interest draws its own step and
/// noise. The result is `Σ‖ε − ε̂‖² / c`, averaged over the batch.
pub fn diffusion_loss(
    tape: &mut Tape,
    store: &ParamStore,
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    r: &Matrix,
    o: &Matrix,
    c: usize,
    seeds: &[u64],
) -> Result<Var> {
    check_inputs(r, o, c, seeds)?;
    bump(|k| k.loss += 1);
    let d = r.cols();
    let (noisy, steps, eps) = tape.frozen(|_| {
        let mut noisy = Matrix::zeros(r.rows(), d);
        let mut eps = Matrix::zeros(r.rows(), d);
        let mut steps = Vec::with_capacity(r.rows());
        for p in 0..r.rows() {
            let mut rng = Rng::derive(seeds[p / c], &[p as u64 % c as u64]);
            let t = rng.range_inclusive(1, schedule.steps());
            for v in eps.row_mut(p) {
                *v = rng.normal();
            }
            let x = schedule
                .q_sample(r.row(p), t, eps.row(p))
                .expect("step drawn in range");
            noisy.row_mut(p).copy_from_slice(&x);
            steps.push(t);
        }
        (noisy, steps, eps)
    });
    let (x, focus) = build_groups(r, &noisy, c, denoiser.guidance.context);
    let n = denoiser.group_size(c);
    let x = tape.constant(x);
    let channels = tape.constant(o.clone());
    let out = denoiser.forward(tape, store, x, &steps, channels, n)?;
    let eps_hat = tape.gather_rows(out, focus)?;
    let eps = tape.constant(eps);
    let diff = tape.sub(eps, eps_hat)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / r.rows() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// Perturbation level drawn uniformly from `1..=T`.
    Train,
    /// Perturbation level fixed at `T'`.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleStart {
    /// `q_sample` of the aggregated interest.
    Perturbed,
    /// Pure standard normal noise.
    Noise,
}

/// Augmented interests `r*` (`(B·c)×d`) for a batch.
#[allow(clippy::too_many_arguments)]
pub fn sample(
    store: &ParamStore,
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    r: &Matrix,
    o: &Matrix,
    c: usize,
    sample_steps: usize,
    mode: SampleMode,
    start: SampleStart,
    seeds: &[u64],
) -> Result<Matrix> {
    check_inputs(r, o, c, seeds)?;
    schedule.check_step(sample_steps)?;
    bump(|k| k.sample += 1);
    let d = r.cols();
    let mut rngs: Vec<Rng> = (0..r.rows())
        .map(|p| Rng::derive(seeds[p / c], &[p as u64 % c as u64]))
        .collect();
    let mut x = Matrix::zeros(r.rows(), d);
    for (p, rng) in rngs.iter_mut().enumerate() {
        let t = match mode {
            SampleMode::Train => rng.range_inclusive(1, schedule.steps()),
            SampleMode::Eval => sample_steps,
        };
        let eps: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let start_row = match start {
            SampleStart::Perturbed => schedule.q_sample(r.row(p), t, &eps)?,
            SampleStart::Noise => eps,
        };
        x.row_mut(p).copy_from_slice(&start_row);
    }
    reverse(store, denoiser, schedule, r, o, c, x, sample_steps, Some(&mut rngs))
}

/// Reverse chain from `x` at step `sample_steps` down to 0. Without `noise`
/// every `z` is zero.
#[allow(clippy::too_many_arguments)]
pub fn reverse(
    store: &ParamStore,
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    r: &Matrix,
    o: &Matrix,
    c: usize,
    mut x: Matrix,
    sample_steps: usize,
    mut noise: Option<&mut [Rng]>,
) -> Result<Matrix> {
    schedule.check_step(sample_steps)?;
    let d = r.cols();
    let n = denoiser.group_size(c);
    let mut tape = Tape::new();
    let mut z = vec![0.0; d];
    for t in (1..=sample_steps).rev() {
        tape.clear();
        let (groups, focus) = build_groups(r, &x, c, denoiser.guidance.context);
        let xv = tape.constant(groups);
        let ch = tape.constant(o.clone());
        let steps = vec![t; r.rows()];
        let out = denoiser.forward(&mut tape, store, xv, &steps, ch, n)?;
        let eps_hat = tape.value(out);
        for (p, &f) in focus.iter().enumerate() {
            let zr = match noise.as_deref_mut() {
                Some(rngs) if t > 1 => {
                    for v in z.iter_mut() {
                        *v = rngs[p].normal();
                    }
                    Some(z.as_slice())
                }
                _ => None,
            };
            schedule.reverse_step(x.row_mut(p), eps_hat.row(f), t, zr);
        }
    }
    if !x.is_finite() {
        return Err(Error::Numerical("non-finite augmented interest".into()));
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedule() -> NoiseSchedule {
        DmigConfig::default().schedule().unwrap()
    }

    fn denoiser(guidance: Guidance, seed: u64) -> (ParamStore, Denoiser) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let den = Denoiser::new(&mut store, 8, &DmigConfig::default(), guidance, &mut rng);
        (store, den)
    }

    #[test]
    fn schedule_endpoints() {
        let s = schedule();
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
        // independent oracle: exp of summed logs
        let log_sum: f64 = (0..1000)
            .map(|i| (1.0 - (1e-4 + i as f64 * (0.02 - 1e-4) / 999.0)).ln())
            .sum();
        assert!((s.alpha_bar(1000) - log_sum.exp()).abs() < 1e-15);
        assert!((s.alpha_bar(1000) - 4.04e-5).abs() < 0.01e-5);
        for t in 2..=1000 {
            assert!(s.beta(t) > s.beta(t - 1));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert_eq!(s.sigma(t), s.beta(t).sqrt());
        }
        assert!(matches!(NoiseSchedule::new(1, 1e-4, 0.02), Err(Error::Config(_))));
    }

    #[test]
    fn q_sample_examples() {
        let s = schedule();
        let eps = [0.3, -1.2];
        let out = s.q_sample(&[0.0, 0.0], 500, &eps).unwrap();
        let k = (1.0 - s.alpha_bar(500)).sqrt();
        assert_eq!(out, vec![k * 0.3, k * -1.2]);
        let out = s.q_sample(&[2.0], 1, &[0.0]).unwrap();
        assert!((out[0] - 2.0 * 0.9999f64.sqrt()).abs() < 1e-15);
        assert!(s.q_sample(&[1.0], 0, &[0.0]).is_err());
        assert!(s.q_sample(&[1.0], 1001, &[0.0]).is_err());
    }

    #[test]
    fn q_sample_quarter_alpha_bar() {
        // a two-step schedule with ᾱ₂ = 0.25 exactly: α = (0.5, 0.5)
        let s = NoiseSchedule::new(2, 0.5 - 1e-12, 0.5).unwrap();
        let out = s.q_sample(&[2.0], 2, &[1.0]).unwrap();
        assert!((out[0] - (1.0 + 0.75f64.sqrt())).abs() < 1e-11);
    }

    #[test]
    fn timestep_embedding_shape() {
        let e = timestep_embedding(0, 8);
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert_ne!(timestep_embedding(5, 8), timestep_embedding(6, 8));
    }

    #[test]
    fn null_output_predicts_zero() {
        let (mut store, den) = denoiser(Guidance::default(), 1);
        den.output.zero(&mut store);
        let mut rng = Rng::new(2);
        let eps = den.denoise(&store, &rng.gaussian(4, 8), 1, 10, rng.gaussian(1, 8).data()).unwrap();
        assert_eq!(eps, vec![0.0; 8]);
    }

    #[test]
    fn guidance_changes_prediction() {
        let (store, den) = denoiser(Guidance::default(), 5);
        let mut rng = Rng::new(6);
        let rows = rng.gaussian(4, 8);
        let o = rng.gaussian(4, 8);
        let a = den.denoise(&store, &rows, 0, 100, o.row(0)).unwrap();
        let b = den.denoise(&store, &rows, 0, 100, o.row(1)).unwrap();
        assert_eq!(a.len(), 8);
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9));
        let mut other = rows.clone();
        other.row_mut(2).iter_mut().enumerate().for_each(|(j, v)| *v += j as f64);
        let c = den.denoise(&store, &other, 0, 100, o.row(0)).unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn no_context_ignores_other_rows() {
        let (store, den) = denoiser(Guidance { context: false, channel: true }, 5);
        let mut rng = Rng::new(6);
        let rows = rng.gaussian(4, 8);
        let mut other = rows.clone();
        other.row_mut(2).iter_mut().enumerate().for_each(|(j, v)| *v += j as f64);
        let o = rng.gaussian(1, 8);
        assert_eq!(
            den.denoise(&store, &rows, 0, 3, o.data()).unwrap(),
            den.denoise(&store, &other, 0, 3, o.data()).unwrap()
        );
    }

    #[test]
    fn zero_denoiser_loss_expectation_is_d() {
        let (mut store, den) = denoiser(Guidance::default(), 1);
        den.output.zero(&mut store);
        let mut rng = Rng::new(3);
        let b = 2000;
        let r = rng.gaussian(b * 4, 8);
        let o = rng.gaussian(b * 4, 8);
        let seeds: Vec<u64> = (0..b as u64).collect();
        let mut tape = Tape::new();
        let loss = diffusion_loss(&mut tape, &store, &den, &schedule(), &r, &o, 4, &seeds).unwrap();
        let v = tape.value(loss).item();
        assert!((v - 8.0).abs() < 0.25, "{v}");
    }

    #[test]
    fn loss_reaches_denoiser_parameters() {
        let (mut store, den) = denoiser(Guidance::default(), 4);
        let mut rng = Rng::new(9);
        let r = rng.gaussian(8, 8);
        let o = rng.gaussian(8, 8);
        let mut tape = Tape::new();
        let loss = diffusion_loss(&mut tape, &store, &den, &schedule(), &r, &o, 4, &[1, 2]).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert!(store.grad(den.output.weight).max_abs() > 0.0);
        // finite difference on one output weight entry
        let h = 1e-5;
        let eval = |store: &ParamStore| {
            let mut t = Tape::new();
            let l = diffusion_loss(&mut t, store, &den, &schedule(), &r, &o, 4, &[1, 2]).unwrap();
            t.value(l).item()
        };
        let mut plus = store.clone();
        plus.value_mut(den.output.weight).data_mut()[3] += h;
        let mut minus = store.clone();
        minus.value_mut(den.output.weight).data_mut()[3] -= h;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let an = store.grad(den.output.weight).data()[3];
        assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "{fd} vs {an}");
    }

    #[test]
    fn zero_denoiser_sampling_telescopes() {
        let (mut store, den) = denoiser(Guidance::default(), 1);
        den.output.zero(&mut store);
        let s = schedule();
        let mut rng = Rng::new(4);
        let r = rng.gaussian(8, 8);
        let o = rng.gaussian(8, 8);
        let x = rng.gaussian(8, 8);
        for tp in [1usize, 3, 20, 50] {
            let out = reverse(&store, &den, &s, &r, &o, 4, x.clone(), tp, None).unwrap();
            let prod: f64 = (1..=tp).map(|t| s.alpha(t).sqrt()).product();
            let want = x.scale(1.0 / prod);
            assert!(out.sub(&want).unwrap().max_abs() < 1e-10);
        }
    }

    #[test]
    fn reverse_step_formula() {
        let s = schedule();
        let mut x = vec![1.0, -2.0];
        s.reverse_step(&mut x, &[0.5, 0.25], 7, Some(&[1.0, -1.0]));
        for (j, (x0, e, z)) in [(1.0, 0.5, 1.0), (-2.0, 0.25, -1.0)].into_iter().enumerate() {
            let want = (x0 - s.beta(7) / (1.0 - s.alpha_bar(7)).sqrt() * e) / s.alpha(7).sqrt()
                + s.beta(7).sqrt() * z;
            assert!((x[j] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn eval_sampling_is_deterministic_and_counted() {
        let (store, den) = denoiser(Guidance::default(), 2);
        let s = schedule();
        let mut rng = Rng::new(5);
        let r = rng.gaussian(8, 8);
        let o = rng.gaussian(8, 8);
        let before = call_counts();
        let a = sample(&store, &den, &s, &r, &o, 4, 20, SampleMode::Eval, SampleStart::Perturbed, &[7, 8]).unwrap();
        let b = sample(&store, &den, &s, &r, &o, 4, 20, SampleMode::Eval, SampleStart::Perturbed, &[7, 8]).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let after = call_counts();
        assert_eq!(after.sample - before.sample, 2);
        assert_eq!(after.loss, before.loss);
        let c = sample(&store, &den, &s, &r, &o, 4, 20, SampleMode::Eval, SampleStart::Noise, &[7, 8]).unwrap();
        assert_ne!(a, c);
        assert!(sample(&store, &den, &s, &r, &o, 4, 0, SampleMode::Eval, SampleStart::Noise, &[7, 8]).is_err());
    }
}
