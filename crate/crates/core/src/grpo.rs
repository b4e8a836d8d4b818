//! Group-relative policy optimization on a toy locate-and-focus task.
//!
//! Each [`ToyEnv`] is a miniature video: a handful of frames, exactly one of
//! which carries the answer symbol. The [`ToyPolicy`] first picks a frame (or
//! skips the selection tool and looks at the average of all frames), then
//! picks an answer symbol from what it sees. Rewards are answer correctness
//! plus a bonus for a valid keyframe selection; advantages are normalized
//! within each group of rollouts, and the policy ascends the clipped surrogate
//! without a KL term.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const TOOL_REWARD: f64 = 0.5;
pub const DEFAULT_EPS: f64 = 0.2;
pub const DEFAULT_DELTA: f64 = 1e-8;
pub const DEFAULT_LR: f64 = 0.1;
pub const DEFAULT_GROUP: usize = 4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GrpoError {
    #[error("non-finite importance ratio for trajectory {0}")]
    NonFinite(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Correctness reward plus the tool bonus when a selection was validly executed.
pub fn compute_reward(answer_correct: bool, tool_used: bool) -> f64 {
    let acc = if answer_correct { 1.0 } else { 0.0 };
    let tool = if tool_used { TOOL_REWARD } else { 0.0 };
    acc + tool
}

/// `(R_i - mean) / (popstd + delta)` within one group.
pub fn group_advantages(rewards: &[f64], delta: f64) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    rewards.iter().map(|r| (r - mean) / (std + delta)).collect()
}

fn ratios(new_logp: &[f64], old_logp: &[f64]) -> Result<Vec<f64>, GrpoError> {
    new_logp
        .iter()
        .zip(old_logp)
        .enumerate()
        .map(|(i, (n, o))| {
            let r = (n - o).exp();
            if r.is_finite() {
                Ok(r)
            } else {
                Err(GrpoError::NonFinite(i))
            }
        })
        .collect()
}

/// The ratio sits where the clipped branch is the minimum and has no slope.
pub fn is_clipped(ratio: f64, advantage: f64, eps: f64) -> bool {
    (advantage > 0.0 && ratio > 1.0 + eps) || (advantage < 0.0 && ratio < 1.0 - eps)
}

/// Clipped surrogate `(1/G) sum_i min(rho_i A_i, clip(rho_i, 1-eps, 1+eps) A_i)`
/// with one trajectory-level ratio per rollout.
pub fn grpo_objective(
    new_logp: &[f64],
    old_logp: &[f64],
    advantages: &[f64],
    eps: f64,
) -> Result<f64, GrpoError> {
    let rho = ratios(new_logp, old_logp)?;
    let g = advantages.len() as f64;
    Ok(rho
        .iter()
        .zip(advantages)
        .map(|(&r, &a)| (r * a).min(r.clamp(1.0 - eps, 1.0 + eps) * a))
        .sum::<f64>()
        / g)
}

/// Derivative of [`grpo_objective`] with respect to each `new_logp_i`.
pub fn grpo_objective_grad_logp(
    new_logp: &[f64],
    old_logp: &[f64],
    advantages: &[f64],
    eps: f64,
) -> Result<Vec<f64>, GrpoError> {
    let rho = ratios(new_logp, old_logp)?;
    let g = advantages.len() as f64;
    Ok(rho
        .iter()
        .zip(advantages)
        .map(|(&r, &a)| if is_clipped(r, a, eps) { 0.0 } else { a * r / g })
        .collect())
}

/// One miniature video.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEnv {
    pub n_frames: usize,
    pub gold_frame: usize,
    pub vocab_size: usize,
    pub gold_answer: usize,
    /// `n_frames` rows of `vocab_size + 1` features: a one-hot symbol block and
    /// a text-present flag set only on the gold frame.
    pub frame_features: Vec<Vec<f64>>,
}

impl ToyEnv {
    pub fn feature_dim(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn mean_features(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.feature_dim()];
        for f in &self.frame_features {
            for (a, b) in m.iter_mut().zip(f) {
                *a += b;
            }
        }
        let n = self.n_frames as f64;
        m.iter_mut().for_each(|x| *x /= n);
        m
    }
}

/// Generator of random [`ToyEnv`] instances of a fixed shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyEnvSuite {
    pub n_frames: usize,
    pub vocab_size: usize,
    /// Magnitude of the feature entries.
    pub feature_scale: f64,
}

impl Default for ToyEnvSuite {
    fn default() -> Self {
        ToyEnvSuite {
            n_frames: 8,
            vocab_size: 4,
            feature_scale: 2.0,
        }
    }
}

impl ToyEnvSuite {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ToyEnv {
        let gold_frame = rng.gen_range(0..self.n_frames);
        let gold_answer = rng.gen_range(0..self.vocab_size);
        let frame_features = (0..self.n_frames)
            .map(|f| {
                let mut x = vec![0.0; self.vocab_size + 1];
                if f == gold_frame {
                    x[gold_answer] = self.feature_scale;
                    x[self.vocab_size] = self.feature_scale;
                } else {
                    // distractor text: some symbol, no evidence flag
                    x[rng.gen_range(0..self.vocab_size)] = self.feature_scale;
                }
                x
            })
            .collect();
        ToyEnv {
            n_frames: self.n_frames,
            gold_frame,
            vocab_size: self.vocab_size,
            gold_answer,
            frame_features,
        }
    }
}

/// Selection outcome of the first turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Choice {
    Frame(usize),
    Skip,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyTrajectory {
    pub choice: Choice,
    pub answer: usize,
    pub old_logp: f64,
}

impl ToyTrajectory {
    pub fn tool_used(&self) -> bool {
        matches!(self.choice, Choice::Frame(_))
    }

    pub fn correct(&self, env: &ToyEnv) -> bool {
        self.answer == env.gold_answer
    }

    pub fn reward(&self, env: &ToyEnv, tool_reward: bool) -> f64 {
        compute_reward(self.correct(env), tool_reward && self.tool_used())
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn log_softmax_at(logits: &[f64], k: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits[k] - lse
}

/// Linear softmax policy. Parameters are stored flat:
/// `[select weights (D) | skip logit (1) | answer matrix (V x D, row-major)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub params: Vec<f64>,
}

impl ToyPolicy {
    pub fn zeros(feature_dim: usize, vocab_size: usize) -> Self {
        ToyPolicy {
            feature_dim,
            vocab_size,
            params: vec![0.0; feature_dim + 1 + vocab_size * feature_dim],
        }
    }

    pub fn for_suite(suite: &ToyEnvSuite) -> Self {
        Self::zeros(suite.vocab_size + 1, suite.vocab_size)
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn select_w(&self) -> &[f64] {
        &self.params[..self.feature_dim]
    }

    fn skip_logit(&self) -> f64 {
        self.params[self.feature_dim]
    }

    fn answer_offset(&self) -> usize {
        self.feature_dim + 1
    }

    fn dot(w: &[f64], x: &[f64]) -> f64 {
        w.iter().zip(x).map(|(a, b)| a * b).sum()
    }

    /// Logits over frames followed by the skip option.
    pub fn select_logits(&self, env: &ToyEnv) -> Vec<f64> {
        let w = self.select_w();
        let mut l: Vec<f64> = env.frame_features.iter().map(|x| Self::dot(w, x)).collect();
        l.push(self.skip_logit());
        l
    }

    pub fn observed(&self, env: &ToyEnv, choice: Choice) -> Vec<f64> {
        match choice {
            Choice::Frame(f) => env.frame_features[f].clone(),
            Choice::Skip => env.mean_features(),
        }
    }

    pub fn answer_logits(&self, x: &[f64]) -> Vec<f64> {
        let off = self.answer_offset();
        (0..self.vocab_size)
            .map(|v| {
                let row = &self.params[off + v * self.feature_dim..off + (v + 1) * self.feature_dim];
                Self::dot(row, x)
            })
            .collect()
    }

    fn choice_index(env: &ToyEnv, choice: Choice) -> usize {
        match choice {
            Choice::Frame(f) => f,
            Choice::Skip => env.n_frames,
        }
    }

    pub fn log_prob(&self, env: &ToyEnv, choice: Choice, answer: usize) -> f64 {
        let sel = log_softmax_at(&self.select_logits(env), Self::choice_index(env, choice));
        let x = self.observed(env, choice);
        sel + log_softmax_at(&self.answer_logits(&x), answer)
    }

    /// Adds `scale * d log pi(choice, answer) / d params` into `out`.
    pub fn accumulate_grad_log_prob(
        &self,
        env: &ToyEnv,
        choice: Choice,
        answer: usize,
        scale: f64,
        out: &mut [f64],
    ) {
        if scale == 0.0 {
            return;
        }
        let d = self.feature_dim;
        let p_sel = softmax(&self.select_logits(env));
        let chosen = Self::choice_index(env, choice);
        // select head: d/dw = x_chosen - sum_f p_f x_f ; skip logit: 1[skip] - p_skip
        for (f, x) in env.frame_features.iter().enumerate() {
            let coef = f64::from(u8::from(f == chosen)) - p_sel[f];
            for k in 0..d {
                out[k] += scale * coef * x[k];
            }
        }
        out[d] += scale * (f64::from(u8::from(chosen == env.n_frames)) - p_sel[env.n_frames]);
        // answer head: d/dW_v = (1[v = answer] - p_v) x
        let x = self.observed(env, choice);
        let p_ans = softmax(&self.answer_logits(&x));
        let off = self.answer_offset();
        for v in 0..self.vocab_size {
            let coef = f64::from(u8::from(v == answer)) - p_ans[v];
            for k in 0..d {
                out[off + v * d + k] += scale * coef * x[k];
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, env: &ToyEnv, rng: &mut R) -> ToyTrajectory {
        let p_sel = softmax(&self.select_logits(env));
        let idx = WeightedIndex::new(&p_sel).expect("finite probabilities").sample(rng);
        let choice = if idx == env.n_frames {
            Choice::Skip
        } else {
            Choice::Frame(idx)
        };
        let p_ans = softmax(&self.answer_logits(&self.observed(env, choice)));
        let answer = WeightedIndex::new(&p_ans).expect("finite probabilities").sample(rng);
        ToyTrajectory {
            choice,
            answer,
            old_logp: self.log_prob(env, choice, answer),
        }
    }

    /// Exact probability of answering correctly, summed over selections.
    pub fn expected_accuracy(&self, env: &ToyEnv) -> f64 {
        let p_sel = softmax(&self.select_logits(env));
        p_sel
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let choice = if i == env.n_frames {
                    Choice::Skip
                } else {
                    Choice::Frame(i)
                };
                p * softmax(&self.answer_logits(&self.observed(env, choice)))[env.gold_answer]
            })
            .sum()
    }

    /// Exact probability of invoking the selection tool.
    pub fn tool_probability(&self, env: &ToyEnv) -> f64 {
        1.0 - softmax(&self.select_logits(env))[env.n_frames]
    }
}

/// Rollouts for one environment with their rewards and advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryGroup {
    pub env: ToyEnv,
    pub trajs: Vec<ToyTrajectory>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl TrajectoryGroup {
    pub fn new(env: ToyEnv, trajs: Vec<ToyTrajectory>, tool_reward: bool, delta: f64) -> Self {
        let rewards: Vec<f64> = trajs.iter().map(|t| t.reward(&env, tool_reward)).collect();
        let advantages = group_advantages(&rewards, delta);
        TrajectoryGroup {
            env,
            trajs,
            rewards,
            advantages,
        }
    }

    pub fn new_logp(&self, policy: &ToyPolicy) -> Vec<f64> {
        self.trajs
            .iter()
            .map(|t| policy.log_prob(&self.env, t.choice, t.answer))
            .collect()
    }

    pub fn old_logp(&self) -> Vec<f64> {
        self.trajs.iter().map(|t| t.old_logp).collect()
    }
}

/// Mean of the per-group clipped objectives.
pub fn batch_objective(policy: &ToyPolicy, groups: &[TrajectoryGroup], eps: f64) -> Result<f64, GrpoError> {
    let mut total = 0.0;
    for g in groups {
        total += grpo_objective(&g.new_logp(policy), &g.old_logp(), &g.advantages, eps)?;
    }
    Ok(total / groups.len() as f64)
}

/// Analytic gradient of [`batch_objective`] with respect to the policy parameters.
pub fn batch_gradient(
    policy: &ToyPolicy,
    groups: &[TrajectoryGroup],
    eps: f64,
) -> Result<Vec<f64>, GrpoError> {
    let mut grad = vec![0.0; policy.n_params()];
    let scale = 1.0 / groups.len() as f64;
    for g in groups {
        let dlogp = grpo_objective_grad_logp(&g.new_logp(policy), &g.old_logp(), &g.advantages, eps)?;
        for (t, d) in g.trajs.iter().zip(dlogp) {
            policy.accumulate_grad_log_prob(&g.env, t.choice, t.answer, scale * d, &mut grad);
        }
    }
    Ok(grad)
}

/// Plain policy-gradient estimate `mean_groups (1/G) sum_i A_i grad log pi(tau_i)`.
pub fn policy_gradient(policy: &ToyPolicy, groups: &[TrajectoryGroup]) -> Vec<f64> {
    let mut grad = vec![0.0; policy.n_params()];
    let scale = 1.0 / groups.len() as f64;
    for g in groups {
        let gsize = g.trajs.len() as f64;
        for (t, a) in g.trajs.iter().zip(&g.advantages) {
            policy.accumulate_grad_log_prob(&g.env, t.choice, t.answer, scale * a / gsize, &mut grad);
        }
    }
    grad
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub steps: usize,
    pub group_size: usize,
    /// Environments sampled per step; each gets its own group.
    pub envs_per_step: usize,
    pub eps: f64,
    pub delta: f64,
    pub lr: f64,
    pub seed: u64,
    pub tool_reward: bool,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            steps: 500,
            group_size: DEFAULT_GROUP,
            envs_per_step: 16,
            eps: DEFAULT_EPS,
            delta: DEFAULT_DELTA,
            lr: DEFAULT_LR,
            seed: 7,
            tool_reward: true,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.group_size < 2 {
            return Err(GrpoError::Config("group size must be at least 2".into()));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(GrpoError::Config("eps must be positive".into()));
        }
        if !(self.delta > 0.0) {
            return Err(GrpoError::Config("delta must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(GrpoError::Config("learning rate must be positive".into()));
        }
        if self.envs_per_step < 1 {
            return Err(GrpoError::Config("envs per step must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_acc: f64,
    pub tool_rate: f64,
    pub clip_frac: f64,
}

/// Samples groups under the current parameters, then takes one ascent step on
/// the clipped objective.
pub fn grpo_step<R: Rng + ?Sized>(
    policy: &mut ToyPolicy,
    envs: &[ToyEnv],
    config: &GrpoConfig,
    rng: &mut R,
) -> Result<(StepStats, Vec<TrajectoryGroup>), GrpoError> {
    config.validate()?;
    let groups: Vec<TrajectoryGroup> = envs
        .iter()
        .map(|env| {
            let trajs = (0..config.group_size).map(|_| policy.sample(env, rng)).collect();
            TrajectoryGroup::new(env.clone(), trajs, config.tool_reward, config.delta)
        })
        .collect();

    let n = (groups.len() * config.group_size) as f64;
    let mut reward = 0.0;
    let mut acc = 0.0;
    let mut tool = 0.0;
    let mut clipped = 0usize;
    for g in &groups {
        let new = g.new_logp(policy);
        for ((t, r), (nl, a)) in g.trajs.iter().zip(&g.rewards).zip(new.iter().zip(&g.advantages)) {
            reward += r;
            acc += f64::from(u8::from(t.correct(&g.env)));
            tool += f64::from(u8::from(t.tool_used()));
            clipped += usize::from(is_clipped((nl - t.old_logp).exp(), *a, config.eps));
        }
    }
    let grad = batch_gradient(policy, &groups, config.eps)?;
    for (p, g) in policy.params.iter_mut().zip(&grad) {
        *p += config.lr * g;
    }
    Ok((
        StepStats {
            step: 0,
            mean_reward: reward / n,
            mean_acc: acc / n,
            tool_rate: tool / n,
            clip_frac: clipped as f64 / n,
        },
        groups,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub curve: Vec<StepStats>,
    pub policy: ToyPolicy,
    /// Expected accuracy of the initial policy, averaged over a fixed probe set.
    pub chance_accuracy: f64,
    pub final_expected_accuracy: f64,
    pub final_tool_probability: f64,
}

impl TrainResult {
    /// Mean of `field` over the last `window` steps.
    pub fn tail_mean(&self, window: usize, field: impl Fn(&StepStats) -> f64) -> f64 {
        let tail = &self.curve[self.curve.len().saturating_sub(window)..];
        tail.iter().map(field).sum::<f64>() / tail.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        curve_csv(&self.curve)
    }
}

pub fn curve_csv(curve: &[StepStats]) -> String {
    let mut out = String::from("step,mean_reward,tool_rate,clip_frac\n");
    for s in curve {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            s.step, s.mean_reward, s.tool_rate, s.clip_frac
        ));
    }
    out
}

const PROBE_ENVS: usize = 256;

fn probe_mean(policy: &ToyPolicy, probes: &[ToyEnv], f: impl Fn(&ToyPolicy, &ToyEnv) -> f64) -> f64 {
    probes.iter().map(|e| f(policy, e)).sum::<f64>() / probes.len() as f64
}

pub fn train(suite: &ToyEnvSuite, config: &GrpoConfig) -> Result<TrainResult, GrpoError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut probe_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let probes: Vec<ToyEnv> = (0..PROBE_ENVS).map(|_| suite.sample(&mut probe_rng)).collect();

    let mut policy = ToyPolicy::for_suite(suite);
    let chance_accuracy = probe_mean(&policy, &probes, ToyPolicy::expected_accuracy);
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let envs: Vec<ToyEnv> = (0..config.envs_per_step).map(|_| suite.sample(&mut rng)).collect();
        let (mut stats, _) = grpo_step(&mut policy, &envs, config, &mut rng)?;
        stats.step = step;
        curve.push(stats);
    }
    Ok(TrainResult {
        final_expected_accuracy: probe_mean(&policy, &probes, ToyPolicy::expected_accuracy),
        final_tool_probability: probe_mean(&policy, &probes, ToyPolicy::tool_probability),
        curve,
        policy,
        chance_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rewards() {
        assert_eq!(compute_reward(true, true), 1.5);
        assert_eq!(compute_reward(true, false), 1.0);
        assert_eq!(compute_reward(false, true), 0.5);
        assert_eq!(compute_reward(false, false), 0.0);
    }

    #[test]
    fn advantages_hand_computed() {
        // mean 1.0, popstd 0.5
        let a = group_advantages(&[1.5, 0.5, 0.5, 1.5], 1e-8);
        for (x, e) in a.iter().zip([1.0, -1.0, -1.0, 1.0]) {
            assert!((x - e).abs() < 1e-6);
        }
        // mean 0.5, popstd 0.5
        let a = group_advantages(&[1.0, 0.0], 1e-8);
        assert!((a[0] - 1.0).abs() < 1e-6 && (a[1] + 1.0).abs() < 1e-6);
        assert_eq!(group_advantages(&[0.5; 4], 1e-8), vec![0.0; 4]);
    }

    #[test]
    fn objective_clip_cases() {
        let eps = 0.2;
        let adv = [1.0, -0.5, 2.0];
        let old = [-1.0, -2.0, -0.3];
        let v = grpo_objective(&old, &old, &adv, eps).unwrap();
        assert!((v - adv.iter().sum::<f64>() / 3.0).abs() < 1e-12);

        let up = (1.0 + 2.0 * eps).ln();
        let v = grpo_objective(&[up], &[0.0], &[1.0], eps).unwrap();
        assert!((v - (1.0 + eps)).abs() < 1e-12);
        let down = (1.0 - 2.0 * eps).ln();
        let v = grpo_objective(&[down], &[0.0], &[-1.0], eps).unwrap();
        assert!((v - -(1.0 - eps)).abs() < 1e-12);

        assert_eq!(
            grpo_objective(&[1000.0], &[0.0], &[1.0], eps),
            Err(GrpoError::NonFinite(0))
        );
    }

    #[test]
    fn clipped_trajectories_have_zero_slope() {
        let g = grpo_objective_grad_logp(&[(1.5f64).ln(), (0.5f64).ln()], &[0.0, 0.0], &[1.0, -1.0], 0.2).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        // other side of each boundary keeps the gradient
        let g = grpo_objective_grad_logp(&[(1.5f64).ln(), (0.5f64).ln()], &[0.0, 0.0], &[-1.0, 1.0], 0.2).unwrap();
        assert!((g[0] - -0.75).abs() < 1e-12 && (g[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn uniform_init_is_chance() {
        let suite = ToyEnvSuite::default();
        let p = ToyPolicy::for_suite(&suite);
        let env = suite.sample(&mut ChaCha8Rng::seed_from_u64(1));
        assert!((p.expected_accuracy(&env) - 0.25).abs() < 1e-12);
        assert!((p.tool_probability(&env) - 8.0 / 9.0).abs() < 1e-12);
        let lp = p.log_prob(&env, Choice::Frame(0), 0);
        assert!((lp - (1.0f64 / 9.0 / 4.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn degenerate_group_has_zero_gradient() {
        let suite = ToyEnvSuite::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let env = suite.sample(&mut rng);
        let mut p = ToyPolicy::for_suite(&suite);
        p.params.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
        let trajs = vec![
            ToyTrajectory { choice: Choice::Frame(1), answer: 0, old_logp: 0.0 },
            ToyTrajectory { choice: Choice::Frame(2), answer: 1, old_logp: 0.0 },
        ];
        let mut trajs = trajs;
        for t in &mut trajs {
            t.old_logp = p.log_prob(&env, t.choice, t.answer);
        }
        // both wrong-or-right identically rewarded -> all advantages zero
        let mut env = env;
        env.gold_answer = 3;
        let g = TrajectoryGroup::new(env, trajs, true, 1e-8);
        assert!(g.advantages.iter().all(|&a| a == 0.0));
        assert!(batch_gradient(&p, &[g], 0.2).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn config_validation() {
        let bad = GrpoConfig { group_size: 1, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = GrpoConfig { eps: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = GrpoConfig { lr: -1.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn csv_header() {
        let csv = curve_csv(&[StepStats { step: 0, mean_reward: 1.0, mean_acc: 0.5, tool_rate: 1.0, clip_frac: 0.0 }]);
        assert_eq!(csv, "step,mean_reward,tool_rate,clip_frac\n0,1.000000,1.000000,0.000000\n");
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn advantage_shift_invariance(r in prop::collection::vec(-3.0f64..3.0, 2..8), c in -10.0f64..10.0) {
            let a = group_advantages(&r, 1e-8);
            let shifted: Vec<f64> = r.iter().map(|x| x + c).collect();
            let b = group_advantages(&shifted, 1e-8);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-6);
            }
        }

        #[test]
        fn advantage_scale_quasi_invariance(r in prop::collection::vec(-3.0f64..3.0, 2..8), k in 0.1f64..10.0) {
            let delta = 1e-8;
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let std = (r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assume!(std > 1e-3);
            let a = group_advantages(&r, delta);
            let scaled: Vec<f64> = r.iter().map(|x| x * k).collect();
            let b = group_advantages(&scaled, delta);
            let factor = (k * std / (k * std + delta)) / (std / (std + delta));
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((y - x * factor).abs() <= 1e-9 * (1.0 + x.abs()));
            }
        }

        #[test]
        fn advantage_moments(r in prop::collection::vec(-3.0f64..3.0, 2..8)) {
            let delta = 1e-8;
            let a = group_advantages(&r, delta);
            let n = a.len() as f64;
            let mean_a = a.iter().sum::<f64>() / n;
            prop_assert!(mean_a.abs() <= 1e-9);
            let mean_r = r.iter().sum::<f64>() / n;
            let std_r = (r.iter().map(|x| (x - mean_r).powi(2)).sum::<f64>() / n).sqrt();
            if std_r > 1e-6 {
                let std_a = (a.iter().map(|x| (x - mean_a).powi(2)).sum::<f64>() / n).sqrt();
                prop_assert!(std_a <= 1.0 + 1e-12);
                prop_assert!(std_a >= 1.0 - delta / std_r - 1e-12);
            }
        }

        #[test]
        fn shrinking_eps_never_raises_positive_clipped(ratio in 1.0f64..3.0, a in 0.01f64..5.0,
                                                       e1 in 0.01f64..0.5, e2 in 0.01f64..0.5) {
            let (small, large) = if e1 < e2 { (e1, e2) } else { (e2, e1) };
            let lp = ratio.ln();
            let v_small = grpo_objective(&[lp], &[0.0], &[a], small).unwrap();
            let v_large = grpo_objective(&[lp], &[0.0], &[a], large).unwrap();
            prop_assert!(v_small <= v_large + 1e-12);
        }
    }
}
