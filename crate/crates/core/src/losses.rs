//! Training objectives: class-weighted cross-entropy, the hard/soft
//! distillation objective, and the attention-transfer and feature-hint
//! mechanism losses.
//!
//! Every function is pure and evaluated in f64. Each returns its value
//! together with the analytic gradient with respect to the student side;
//! teacher inputs are treated as constants.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::resize::resize_plane_f64;
use crate::nn::{Param, Parameterized, Tensor};

pub const DEFAULT_TEMPERATURE: f64 = 4.0;
pub const DEFAULT_ALPHA: f64 = 0.6;
pub const DEFAULT_MECHANISM_WEIGHT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    None,
    LogitKd,
    AttentionTransfer,
    FeatureHint,
}

impl Mechanism {
    pub const ALL: [Mechanism; 4] = [
        Mechanism::None,
        Mechanism::LogitKd,
        Mechanism::AttentionTransfer,
        Mechanism::FeatureHint,
    ];

    pub fn needs_teacher(self) -> bool {
        self != Mechanism::None
    }

    pub fn uses_tap(self) -> bool {
        matches!(self, Mechanism::AttentionTransfer | Mechanism::FeatureHint)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillParams {
    pub temperature: f64,
    pub alpha: f64,
    pub mechanism: Mechanism,
    pub mechanism_weight: f64,
}

impl Default for DistillParams {
    fn default() -> Self {
        Self::with_mechanism(Mechanism::None)
    }
}

impl DistillParams {
    pub fn with_mechanism(mechanism: Mechanism) -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            alpha: DEFAULT_ALPHA,
            mechanism,
            mechanism_weight: DEFAULT_MECHANISM_WEIGHT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha must lie in [0,1], got {}",
                self.alpha
            )));
        }
        if !(self.mechanism_weight >= 0.0 && self.mechanism_weight.is_finite()) {
            return Err(Error::Config(format!(
                "mechanism weight must be >= 0, got {}",
                self.mechanism_weight
            )));
        }
        Ok(())
    }
}

/// Per-class weights for the hard-label term, indexed by class (0 negative, 1 positive).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(pub [f64; 2]);

impl ClassWeights {
    pub const UNIT: ClassWeights = ClassWeights([1.0, 1.0]);
}

/// w_c = N / (K · n_c).
pub fn inverse_frequency_weights(counts: [usize; 2]) -> Result<ClassWeights> {
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::InvalidInput(format!(
            "class {c} has no training examples"
        )));
    }
    let total = counts.iter().sum::<usize>() as f64;
    Ok(ClassWeights(counts.map(|n| total / (2.0 * n as f64))))
}

/// A batch of feature maps in f64, shape (N, C, H, W).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "feature map size"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::new(shape, vec![0.0; shape.iter().product()])
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let (n, c, h, w) = t.dims4();
        Self::new([n, c, h, w], t.data.iter().map(|&v| v as f64).collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&self.shape, self.data.iter().map(|&v| v as f32).collect())
    }

    pub fn item(&self, i: usize) -> &[f64] {
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[i * per..(i + 1) * per]
    }

    fn item_mut(&mut self, i: usize) -> &mut [f64] {
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        &mut self.data[i * per..(i + 1) * per]
    }

    /// Bilinearly resamples every plane to `(h, w)`; a no-op clone when the
    /// size already matches.
    pub fn resized(&self, h: usize, w: usize) -> FeatureMap {
        let [n, c, h0, w0] = self.shape;
        if (h0, w0) == (h, w) {
            return self.clone();
        }
        let mut data = Vec::with_capacity(n * c * h * w);
        for plane in self.data.chunks(h0 * w0) {
            data.extend(resize_plane_f64(plane, h0, w0, h, w));
        }
        FeatureMap::new([n, c, h, w], data)
    }
}

/// A loss value with its gradient with respect to the student logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitLoss {
    pub value: f64,
    pub d_logits: Vec<[f64; 2]>,
}

fn softmax(z: [f64; 2], temperature: f64) -> [f64; 2] {
    let a = z[0] / temperature;
    let b = z[1] / temperature;
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    let s = ea + eb;
    [ea / s, eb / s]
}

fn log_softmax(z: [f64; 2], temperature: f64) -> [f64; 2] {
    let a = z[0] / temperature;
    let b = z[1] / temperature;
    let m = a.max(b);
    let lse = m + ((a - m).exp() + (b - m).exp()).ln();
    [a - lse, b - lse]
}

fn check_batch(logits: &[[f64; 2]], labels: &[usize]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::Empty("loss batch".into()));
    }
    if logits.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logits vs {} labels",
            logits.len(),
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidInput(format!(
            "label {l} outside the binary task"
        )));
    }
    Ok(())
}

/// Σ_i w_{y_i}·(−log p_{i,y_i}) / Σ_i w_{y_i}.
pub fn weighted_ce(
    logits: &[[f64; 2]],
    labels: &[usize],
    weights: ClassWeights,
) -> Result<LogitLoss> {
    check_batch(logits, labels)?;
    let total_w: f64 = labels.iter().map(|&y| weights.0[y]).sum();
    let mut value = 0.0;
    let mut d_logits = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(labels) {
        let w = weights.0[y];
        value -= w * log_softmax(z, 1.0)[y];
        let p = softmax(z, 1.0);
        let mut g = [p[0] * w / total_w, p[1] * w / total_w];
        g[y] -= w / total_w;
        d_logits.push(g);
    }
    Ok(LogitLoss {
        value: value / total_w,
        d_logits,
    })
}

/// Batch mean of KL(softmax(teacher/T) ‖ softmax(student/T)), without the T² factor.
pub fn softened_kl(
    student: &[[f64; 2]],
    teacher: &[[f64; 2]],
    temperature: f64,
) -> Result<LogitLoss> {
    if student.len() != teacher.len() || student.is_empty() {
        return Err(Error::Shape(format!(
            "{} student vs {} teacher logits",
            student.len(),
            teacher.len()
        )));
    }
    let n = student.len() as f64;
    let mut value = 0.0;
    let mut d_logits = Vec::with_capacity(student.len());
    for (&s, &t) in student.iter().zip(teacher) {
        let pt = softmax(t, temperature);
        let lt = log_softmax(t, temperature);
        let ls = log_softmax(s, temperature);
        value += (0..2)
            .filter(|&k| pt[k] > 0.0)
            .map(|k| pt[k] * (lt[k] - ls[k]))
            .sum::<f64>();
        let ps = softmax(s, temperature);
        d_logits.push([
            (ps[0] - pt[0]) / (temperature * n),
            (ps[1] - pt[1]) / (temperature * n),
        ]);
    }
    Ok(LogitLoss {
        value: value / n,
        d_logits,
    })
}

/// (1−α)·weighted CE + α·T²·KL(teacher ‖ student).
pub fn kd_objective(
    student: &[[f64; 2]],
    teacher: &[[f64; 2]],
    labels: &[usize],
    params: &DistillParams,
    weights: ClassWeights,
) -> Result<LogitLoss> {
    params.validate()?;
    let ce = weighted_ce(student, labels, weights)?;
    let kl = softened_kl(student, teacher, params.temperature)?;
    let (a, t2) = (params.alpha, params.temperature * params.temperature);
    Ok(LogitLoss {
        value: (1.0 - a) * ce.value + a * t2 * kl.value,
        d_logits: ce
            .d_logits
            .iter()
            .zip(&kl.d_logits)
            .map(|(c, k)| {
                [
                    (1.0 - a) * c[0] + a * t2 * k[0],
                    (1.0 - a) * c[1] + a * t2 * k[1],
                ]
            })
            .collect(),
    })
}

/// Channel-energy map Σ_c x², flattened over sites and L2-normalized; an
/// all-zero map stays zero.
pub fn attention_map(feature: &[f64], channels: usize) -> Vec<f64> {
    let sites = feature.len() / channels;
    let mut q = vec![0.0; sites];
    for plane in feature.chunks(sites) {
        for (a, &x) in q.iter_mut().zip(plane) {
            *a += x * x;
        }
    }
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        q.iter_mut().for_each(|v| *v /= norm);
    }
    q
}

/// Mean over taps and batch items of ‖a(student) − a(teacher)‖²; teacher
/// maps are resized to the student's spatial size first. Returns the value
/// and the gradient for each student tap.
pub fn attention_transfer_loss(
    student: &[FeatureMap],
    teacher: &[FeatureMap],
) -> Result<(f64, Vec<FeatureMap>)> {
    if student.len() != teacher.len() {
        return Err(Error::Shape(format!(
            "{} student taps vs {} teacher taps",
            student.len(),
            teacher.len()
        )));
    }
    if student.is_empty() {
        return Err(Error::Empty("attention taps".into()));
    }
    let n_taps = student.len() as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(student.len());
    for (s, t) in student.iter().zip(teacher) {
        let [n, c, h, w] = s.shape;
        if t.shape[0] != n {
            return Err(Error::Shape(format!("tap batch {} vs {}", n, t.shape[0])));
        }
        let t = t.resized(h, w);
        let scale = 1.0 / (n_taps * n as f64);
        let mut g = FeatureMap::zeros(s.shape);
        for i in 0..n {
            let xs = s.item(i);
            let a_s = attention_map(xs, c);
            let a_t = attention_map(t.item(i), t.shape[1]);
            let diff: Vec<f64> = a_s.iter().zip(&a_t).map(|(a, b)| a - b).collect();
            value += scale * diff.iter().map(|d| d * d).sum::<f64>();

            // d‖a−b‖²/dq = (I − a aᵀ)·2(a−b)/‖q‖, dq/dx = 2x.
            let q_norm = {
                let mut q = vec![0.0; h * w];
                for plane in xs.chunks(h * w) {
                    for (a, &x) in q.iter_mut().zip(plane) {
                        *a += x * x;
                    }
                }
                q.iter().map(|v| v * v).sum::<f64>().sqrt()
            };
            if q_norm == 0.0 {
                continue;
            }
            let proj: f64 = a_s.iter().zip(&diff).map(|(a, d)| a * d).sum();
            let dq: Vec<f64> = a_s
                .iter()
                .zip(&diff)
                .map(|(a, d)| scale * 2.0 * (d - a * proj) / q_norm)
                .collect();
            for (gp, xp) in g.item_mut(i).chunks_mut(h * w).zip(xs.chunks(h * w)) {
                for ((gv, &x), dqv) in gp.iter_mut().zip(xp).zip(&dq) {
                    *gv = 2.0 * x * dqv;
                }
            }
        }
        grads.push(g);
    }
    Ok((value, grads))
}

/// Learned 1×1 projection from student channels to teacher channels.
#[derive(Debug, Clone)]
pub struct HintAdapter {
    pub in_channels: usize,
    pub out_channels: usize,
    /// (out, in), row-major.
    pub weight: Param,
    pub bias: Param,
}

impl HintAdapter {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            in_channels,
            out_channels,
            weight: Param::fan_in_uniform(&[out_channels, in_channels], in_channels, 3.0, rng),
            bias: Param::zeros(&[out_channels]),
        }
    }

    pub fn identity(channels: usize) -> Self {
        let mut weight = Param::zeros(&[channels, channels]);
        for i in 0..channels {
            weight.value[i * channels + i] = 1.0;
        }
        Self {
            in_channels: channels,
            out_channels: channels,
            weight,
            bias: Param::zeros(&[channels]),
        }
    }
}

impl Parameterized for HintAdapter {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&crate::nn::param::join(prefix, "weight"), &self.weight);
        f(&crate::nn::param::join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&crate::nn::param::join(prefix, "weight"), &mut self.weight);
        f(&crate::nn::param::join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone)]
pub struct HintTerms {
    pub value: f64,
    pub d_student: FeatureMap,
    pub d_weight: Vec<f64>,
    pub d_bias: Vec<f64>,
}

/// Mean squared error between adapter(student) and the teacher feature
/// resized to the student's spatial size.
pub fn hint_loss(
    student: &FeatureMap,
    teacher: &FeatureMap,
    adapter: &HintAdapter,
) -> Result<HintTerms> {
    let [n, cs, h, w] = student.shape;
    if cs != adapter.in_channels {
        return Err(Error::Shape(format!(
            "adapter expects {} channels, got {cs}",
            adapter.in_channels
        )));
    }
    if teacher.shape[0] != n || teacher.shape[1] != adapter.out_channels {
        return Err(Error::Shape(format!(
            "teacher feature {:?} does not match adapter output {}",
            teacher.shape, adapter.out_channels
        )));
    }
    let t = teacher.resized(h, w);
    let ct = adapter.out_channels;
    let hw = h * w;
    let wts: Vec<f64> = adapter.weight.value.iter().map(|&v| v as f64).collect();
    let bias: Vec<f64> = adapter.bias.value.iter().map(|&v| v as f64).collect();
    let count = (n * ct * hw) as f64;
    let mut value = 0.0;
    let mut d_student = FeatureMap::zeros(student.shape);
    let mut d_weight = vec![0.0; ct * cs];
    let mut d_bias = vec![0.0; ct];
    let mut resid = vec![0.0; ct * hw];
    for i in 0..n {
        let x = student.item(i);
        let ti = t.item(i);
        for o in 0..ct {
            let r = &mut resid[o * hw..(o + 1) * hw];
            r.fill(bias[o]);
            for k in 0..cs {
                let wk = wts[o * cs + k];
                for (rv, xv) in r.iter_mut().zip(&x[k * hw..(k + 1) * hw]) {
                    *rv += wk * xv;
                }
            }
            for (rv, tv) in r.iter_mut().zip(&ti[o * hw..(o + 1) * hw]) {
                *rv -= tv;
                value += *rv * *rv;
                *rv *= 2.0 / count;
            }
        }
        let dx = d_student.item_mut(i);
        for o in 0..ct {
            let r = &resid[o * hw..(o + 1) * hw];
            d_bias[o] += r.iter().sum::<f64>();
            for k in 0..cs {
                let xk = &x[k * hw..(k + 1) * hw];
                d_weight[o * cs + k] += r.iter().zip(xk).map(|(a, b)| a * b).sum::<f64>();
                let wk = wts[o * cs + k];
                for (d, rv) in dx[k * hw..(k + 1) * hw].iter_mut().zip(r) {
                    *d += wk * rv;
                }
            }
        }
    }
    Ok(HintTerms {
        value: value / count,
        d_student,
        d_weight,
        d_bias,
    })
}

/// Everything the combined objective may need for one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub student_logits: &'a [[f64; 2]],
    pub teacher_logits: Option<&'a [[f64; 2]]>,
    pub labels: &'a [usize],
    pub student_tap: Option<&'a FeatureMap>,
    pub teacher_tap: Option<&'a FeatureMap>,
}

#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub value: f64,
    /// Hard/soft logit part alone.
    pub logit_part: f64,
    /// Unweighted mechanism loss (0 without a mechanism).
    pub mechanism_part: f64,
    pub d_logits: Vec<[f64; 2]>,
    pub d_student_tap: Option<FeatureMap>,
    /// Adapter gradients (weight, bias) for the feature hint.
    pub d_adapter: Option<(Vec<f64>, Vec<f64>)>,
}

/// none → weighted CE; logit KD → the distillation objective; attention
/// transfer and feature hint → the distillation objective plus β times the
/// mechanism loss.
pub fn total_loss(
    inputs: LossInputs<'_>,
    params: &DistillParams,
    weights: ClassWeights,
    adapter: Option<&HintAdapter>,
) -> Result<TotalLoss> {
    params.validate()?;
    if params.mechanism == Mechanism::None {
        let ce = weighted_ce(inputs.student_logits, inputs.labels, weights)?;
        return Ok(TotalLoss {
            value: ce.value,
            logit_part: ce.value,
            mechanism_part: 0.0,
            d_logits: ce.d_logits,
            d_student_tap: None,
            d_adapter: None,
        });
    }
    let teacher = inputs
        .teacher_logits
        .ok_or_else(|| Error::Config(format!("{:?} requires teacher outputs", params.mechanism)))?;
    let kd = kd_objective(
        inputs.student_logits,
        teacher,
        inputs.labels,
        params,
        weights,
    )?;
    let mut out = TotalLoss {
        value: kd.value,
        logit_part: kd.value,
        mechanism_part: 0.0,
        d_logits: kd.d_logits,
        d_student_tap: None,
        d_adapter: None,
    };
    if !params.mechanism.uses_tap() {
        return Ok(out);
    }
    let (Some(s_tap), Some(t_tap)) = (inputs.student_tap, inputs.teacher_tap) else {
        return Err(Error::Config(format!(
            "{:?} requires student and teacher taps",
            params.mechanism
        )));
    };
    let beta = params.mechanism_weight;
    let (mech, mut d_tap, d_adapter) = match params.mechanism {
        Mechanism::AttentionTransfer => {
            let (v, mut g) =
                attention_transfer_loss(std::slice::from_ref(s_tap), std::slice::from_ref(t_tap))?;
            (v, g.remove(0), None)
        }
        Mechanism::FeatureHint => {
            let adapter =
                adapter.ok_or_else(|| Error::Config("feature hint requires an adapter".into()))?;
            let h = hint_loss(s_tap, t_tap, adapter)?;
            let scale = |v: Vec<f64>| v.into_iter().map(|x| beta * x).collect::<Vec<_>>();
            (
                h.value,
                h.d_student,
                Some((scale(h.d_weight), scale(h.d_bias))),
            )
        }
        Mechanism::None | Mechanism::LogitKd => unreachable!(),
    };
    d_tap.data.iter_mut().for_each(|g| *g *= beta);
    out.value += beta * mech;
    out.mechanism_part = mech;
    out.d_student_tap = Some(d_tap);
    out.d_adapter = d_adapter;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    use super::*;

    #[test]
    fn inverse_frequency_examples() {
        assert_eq!(inverse_frequency_weights([2, 2]).unwrap().0, [1.0, 1.0]);
        let w = inverse_frequency_weights([3, 1]).unwrap().0;
        assert_abs_diff_eq!(w[0], 4.0 / 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w[1], 2.0, epsilon = 1e-12);
        let w = inverse_frequency_weights([9, 1]).unwrap().0;
        assert_abs_diff_eq!(w[0], 10.0 / 18.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w[1], 5.0, epsilon = 1e-12);
        assert!(inverse_frequency_weights([3, 0]).is_err());
    }

    #[test]
    fn weighted_ce_examples() {
        let ce = weighted_ce(&[[0.0, 0.0]], &[0], ClassWeights::UNIT).unwrap();
        assert_abs_diff_eq!(ce.value, 2f64.ln(), epsilon = 1e-12);
        assert!(
            weighted_ce(&[[10.0, -10.0]], &[0], ClassWeights::UNIT)
                .unwrap()
                .value
                < 1e-8
        );
        // Unreduced term for label 1 is w_1·ln 2; the weighted mean divides by w_1.
        let w = ClassWeights([2.0 / 3.0, 2.0]);
        let single = weighted_ce(&[[0.0, 0.0]], &[1], w).unwrap();
        assert_abs_diff_eq!(single.value * w.0[1], 2.0 * 2f64.ln(), epsilon = 1e-12);
        // Mixed batch: (w0·ln2 + w1·ln2)/(w0 + w1) = ln 2.
        let mixed = weighted_ce(&[[0.0, 0.0], [0.0, 0.0]], &[0, 1], w).unwrap();
        assert_abs_diff_eq!(mixed.value, 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn kd_objective_examples() {
        let p = DistillParams {
            temperature: 2.0,
            alpha: 1.0,
            ..DistillParams::with_mechanism(Mechanism::LogitKd)
        };
        let l = kd_objective(&[[0.0, 0.0]], &[[2.0, 0.0]], &[0], &p, ClassWeights::UNIT).unwrap();
        // Softened teacher is (e/(e+1), 1/(e+1)); KL against uniform, times T² = 4.
        let a = 1f64.exp() / (1f64.exp() + 1.0);
        let want = 4.0 * (a * (2.0 * a).ln() + (1.0 - a) * (2.0 * (1.0 - a)).ln());
        assert_abs_diff_eq!(l.value, want, epsilon = 1e-12);
        // Quoted to three places as 0.444; the exact value is 0.443776.
        assert_abs_diff_eq!(l.value, 0.444, epsilon = 1e-3);

        let z = [[0.3, -1.2], [2.0, 0.5]];
        let p = DistillParams::with_mechanism(Mechanism::LogitKd);
        let same = kd_objective(&z, &z, &[1, 0], &p, ClassWeights::UNIT).unwrap();
        let ce = weighted_ce(&z, &[1, 0], ClassWeights::UNIT).unwrap();
        assert_abs_diff_eq!(same.value, (1.0 - p.alpha) * ce.value, epsilon = 1e-12);
        let p0 = DistillParams { alpha: 0.0, ..p };
        let hard = kd_objective(
            &z,
            &[[5.0, -5.0], [-1.0, 1.0]],
            &[1, 0],
            &p0,
            ClassWeights::UNIT,
        )
        .unwrap();
        assert_eq!(hard.value, ce.value);
    }

    #[test]
    fn attention_map_examples() {
        // One-hot at site 2 of a 2×2 map with 3 channels.
        let mut f = vec![0.0; 12];
        f[4 + 2] = 3.0;
        assert_eq!(attention_map(&f, 3), vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(attention_map(&[0.0; 12], 3), vec![0.0; 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut q = [0.0; 4];
        for c in 0..3 {
            for s in 0..4 {
                q[s] += f[c * 4 + s] * f[c * 4 + s];
            }
        }
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (a, b) in attention_map(&f, 3).iter().zip(q) {
            assert_abs_diff_eq!(*a, b / norm, epsilon = 1e-12);
        }
    }

    #[test]
    fn attention_transfer_examples() {
        let mut a = FeatureMap::zeros([1, 2, 2, 2]);
        let mut b = FeatureMap::zeros([1, 2, 2, 2]);
        a.data[0] = 1.0;
        b.data[4 + 3] = 2.0;
        let (v, _) = attention_transfer_loss(&[a.clone()], &[b.clone()]).unwrap();
        assert_abs_diff_eq!(v, 2.0, epsilon = 1e-12);
        let (v, _) =
            attention_transfer_loss(&[a.clone(), a.clone()], &[b.clone(), a.clone()]).unwrap();
        assert_abs_diff_eq!(v, 1.0, epsilon = 1e-12);
        assert_eq!(
            attention_transfer_loss(&[a.clone()], &[a.clone()])
                .unwrap()
                .0,
            0.0
        );
        assert!(attention_transfer_loss(&[a.clone()], &[]).is_err());
    }

    #[test]
    fn hint_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = FeatureMap::new(
            [2, 3, 2, 2],
            (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let id = HintAdapter::identity(3);
        assert_eq!(hint_loss(&s, &s, &id).unwrap().value, 0.0);
        let shifted = FeatureMap::new(s.shape, s.data.iter().map(|v| v + 1.0).collect());
        assert_abs_diff_eq!(
            hint_loss(&s, &shifted, &id).unwrap().value,
            1.0,
            epsilon = 1e-12
        );

        let adapter = HintAdapter::new(3, 4, &mut rng);
        let t = FeatureMap::new(
            [2, 4, 2, 2],
            (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let mut sse = 0.0;
        for i in 0..2 {
            for o in 0..4 {
                for site in 0..4 {
                    let mut y = adapter.bias.value[o] as f64;
                    for k in 0..3 {
                        y += adapter.weight.value[o * 3 + k] as f64 * s.data[i * 12 + k * 4 + site];
                    }
                    sse += (y - t.data[i * 16 + o * 4 + site]).powi(2);
                }
            }
        }
        assert_abs_diff_eq!(
            hint_loss(&s, &t, &adapter).unwrap().value,
            sse / 32.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn teacher_maps_are_resized_to_student_size() {
        let s = FeatureMap::new([1, 1, 2, 2], vec![1.0; 4]);
        let t = FeatureMap::new([1, 1, 4, 4], vec![1.0; 16]);
        assert_eq!(
            hint_loss(&s, &t, &HintAdapter::identity(1)).unwrap().value,
            0.0
        );
        assert_eq!(
            attention_transfer_loss(std::slice::from_ref(&s), &[t])
                .unwrap()
                .0,
            0.0
        );
    }

    #[test]
    fn total_loss_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = [[0.4, -0.1], [1.5, 0.2], [-0.3, 0.9]];
        let tz = [[1.0, -1.0], [0.0, 0.5], [0.2, 0.2]];
        let y = [0, 1, 1];
        let s = FeatureMap::new(
            [3, 2, 2, 2],
            (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let t = FeatureMap::new(
            [3, 4, 2, 2],
            (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let adapter = HintAdapter::new(2, 4, &mut rng);
        let w = ClassWeights([0.75, 1.5]);
        let inputs = LossInputs {
            student_logits: &z,
            teacher_logits: Some(&tz),
            labels: &y,
            student_tap: Some(&s),
            teacher_tap: Some(&t),
        };
        let none = total_loss(inputs, &DistillParams::default(), w, None).unwrap();
        assert_eq!(none.value, weighted_ce(&z, &y, w).unwrap().value);

        let kd = kd_objective(
            &z,
            &tz,
            &y,
            &DistillParams::with_mechanism(Mechanism::LogitKd),
            w,
        )
        .unwrap();
        let at0 = DistillParams {
            mechanism_weight: 0.0,
            ..DistillParams::with_mechanism(Mechanism::AttentionTransfer)
        };
        assert_eq!(total_loss(inputs, &at0, w, None).unwrap().value, kd.value);

        let hint = DistillParams::with_mechanism(Mechanism::FeatureHint);
        let h = hint_loss(&s, &t, &adapter).unwrap().value;
        let total = total_loss(inputs, &hint, w, Some(&adapter)).unwrap();
        assert_abs_diff_eq!(total.value, kd.value + 0.5 * h, epsilon = 1e-12);

        let missing = LossInputs {
            teacher_logits: None,
            ..inputs
        };
        assert!(total_loss(
            missing,
            &DistillParams::with_mechanism(Mechanism::LogitKd),
            w,
            None
        )
        .is_err());
        assert!(total_loss(inputs, &hint, w, None).is_err());
    }

    #[test]
    fn invalid_params_are_rejected() {
        let bad_t = DistillParams {
            temperature: 0.0,
            ..DistillParams::default()
        };
        assert!(bad_t.validate().is_err());
        let bad_a = DistillParams {
            alpha: 1.5,
            ..DistillParams::default()
        };
        assert!(bad_a.validate().is_err());
    }

    #[test]
    fn softened_distributions_approach_uniform_monotonically() {
        let z = [3.0, -1.0];
        let mut prev = f64::INFINITY;
        for t in [1.0, 2.0, 4.0, 8.0, 16.0, 64.0, 256.0] {
            let p = softmax(z, t);
            let gap = (p[0] - 0.5).abs();
            assert!(gap < prev);
            prev = gap;
        }
        assert!(prev < 0.01);
    }

    fn logit_pair() -> impl Strategy<Value = [f64; 2]> {
        (-8.0..8.0f64, -8.0..8.0f64).prop_map(|(a, b)| [a, b])
    }

    proptest! {
        #[test]
        fn kl_is_non_negative_and_zero_on_equal_inputs(
            s in prop::collection::vec(logit_pair(), 1..6),
            t in prop::collection::vec(logit_pair(), 1..6),
            temp in 0.5..10.0f64,
        ) {
            let n = s.len().min(t.len());
            let kl = softened_kl(&s[..n], &t[..n], temp).unwrap().value;
            prop_assert!(kl >= -1e-15);
            prop_assert!(softened_kl(&s[..n], &s[..n], temp).unwrap().value.abs() < 1e-15);
        }

        #[test]
        fn objective_is_affine_in_alpha(
            s in prop::collection::vec(logit_pair(), 3),
            t in prop::collection::vec(logit_pair(), 3),
            alpha in 0.0..1.0f64,
        ) {
            let y = [0, 1, 1];
            let base = DistillParams::with_mechanism(Mechanism::LogitKd);
            let at = |a: f64| kd_objective(&s, &t, &y, &DistillParams { alpha: a, ..base }, ClassWeights::UNIT).unwrap().value;
            let ce = weighted_ce(&s, &y, ClassWeights::UNIT).unwrap().value;
            let soft = base.temperature.powi(2) * softened_kl(&s, &t, base.temperature).unwrap().value;
            prop_assert!((at(0.0) - ce).abs() < 1e-12);
            prop_assert!((at(1.0) - soft).abs() < 1e-12);
            prop_assert!((at(alpha) - ((1.0 - alpha) * at(0.0) + alpha * at(1.0))).abs() < 1e-10);
        }
    }
}
