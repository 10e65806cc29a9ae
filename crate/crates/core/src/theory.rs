//! Numerical checks of the merge-loss bound for two tasks: cross-task
//! linearity residual, the Jensen upper bound and the synergy tightening.

use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::loss::{self, LossKind, Target};
use crate::nn::{Activation, LayerParams, Network};
use crate::seed;
use crate::{Error, Result};

/// Slack allowed on the Jensen bound for floating-point error.
pub const BOUND_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    /// Affine encoder layers with no activation: outputs are linear in each layer's parameters.
    Linear,
    /// Tanh encoder.
    Nonlinear,
}

impl ModelFamily {
    fn activation(self) -> Activation {
        match self {
            ModelFamily::Linear => Activation::Identity,
            ModelFamily::Nonlinear => Activation::Tanh,
        }
    }
}

fn network<'a>(
    family: ModelFamily,
    encoder: &'a [LayerParams],
    head: &'a LayerParams,
) -> Result<Network<'a>> {
    let mut layers: Vec<&LayerParams> = encoder.iter().collect();
    layers.push(head);
    Network::new(layers, family.activation())
}

fn midpoint(a: &[LayerParams], b: &[LayerParams]) -> Result<Vec<LayerParams>> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("{} layers vs {}", a.len(), b.len())));
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let mut m = x.scaled(0.5);
            m.axpy(0.5, y)?;
            Ok(m)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CtlResidual {
    pub max: f64,
    pub mean: f64,
}

/// Per-sample `‖f(x; ½(θ_i+θ_j)) − ½f(x; θ_i) − ½f(x; θ_j)‖` over `inputs`.
pub fn ctl_residual(
    family: ModelFamily,
    theta_i: &[LayerParams],
    theta_j: &[LayerParams],
    head: &LayerParams,
    inputs: &Matrix,
) -> Result<CtlResidual> {
    if inputs.rows() == 0 {
        return Err(Error::invalid("no inputs"));
    }
    let mid = midpoint(theta_i, theta_j)?;
    let fm = network(family, &mid, head)?.forward(inputs)?;
    let fi = network(family, theta_i, head)?.forward(inputs)?;
    let fj = network(family, theta_j, head)?.forward(inputs)?;
    let mut max = 0.0f64;
    let mut sum = 0.0;
    for r in 0..inputs.rows() {
        let norm = fm
            .row(r)
            .iter()
            .zip(fi.row(r))
            .zip(fj.row(r))
            .map(|((m, a), b)| (m - 0.5 * a - 0.5 * b).powi(2))
            .sum::<f64>()
            .sqrt();
        max = max.max(norm);
        sum += norm;
    }
    Ok(CtlResidual {
        max,
        mean: sum / inputs.rows() as f64,
    })
}

/// Task `j`'s evaluation data and loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalData {
    pub inputs: Matrix,
    pub target: Target,
    pub loss: LossKind,
}

impl EvalData {
    fn loss_of(
        &self,
        family: ModelFamily,
        encoder: &[LayerParams],
        head: &LayerParams,
    ) -> Result<f64> {
        if self.inputs.rows() == 0 {
            return Err(Error::invalid("empty evaluation data"));
        }
        let out = network(family, encoder, head)?.forward(&self.inputs)?;
        loss::loss_eval(&out, &self.target, self.loss)
    }
}

/// `ε_ij = L_j(θ_0) − L_j(θ_0 + τ_i)`. Positive means synergy.
pub fn synergy_eps(
    family: ModelFamily,
    theta_0: &[LayerParams],
    tau_i: &[LayerParams],
    head: &LayerParams,
    data: &EvalData,
) -> Result<f64> {
    let theta_i = add(theta_0, tau_i)?;
    Ok(data.loss_of(family, theta_0, head)? - data.loss_of(family, &theta_i, head)?)
}

fn add(a: &[LayerParams], b: &[LayerParams]) -> Result<Vec<LayerParams>> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("{} layers vs {}", a.len(), b.len())));
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let mut s = x.clone();
            s.axpy(1.0, y)?;
            Ok(s)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interaction {
    Interference,
    Disentangled,
    Synergy,
}

impl Interaction {
    pub fn from_eps(eps: f64) -> Self {
        if eps > 0.0 {
            Interaction::Synergy
        } else if eps < 0.0 {
            Interaction::Interference
        } else {
            Interaction::Disentangled
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Interaction::Interference => "interference",
            Interaction::Disentangled => "disentangled",
            Interaction::Synergy => "synergy",
        }
    }
}

/// Two task-tuned encoders from a shared start, sharing one head, scored on task `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prop1Instance {
    pub family: ModelFamily,
    pub theta_0: Vec<LayerParams>,
    pub theta_i: Vec<LayerParams>,
    pub theta_j: Vec<LayerParams>,
    pub head: LayerParams,
    pub data: EvalData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop1Report {
    pub family: ModelFamily,
    pub ctl_residual: CtlResidual,
    pub loss_pre: f64,
    pub loss_i: f64,
    pub loss_j: f64,
    pub loss_merge: f64,
    /// `½L_j(f_i) + ½L_j(f_j)`.
    pub bound_jensen: f64,
    pub jensen_holds: bool,
    /// `½L_j(f_0) + ½L_j(f_j)`.
    pub bound_disentangled: f64,
    /// `bound_disentangled − ε/2`; equals `bound_jensen` by construction.
    pub bound_synergy: f64,
    pub eps: f64,
    pub classification: Interaction,
}

impl Prop1Report {
    /// How far the merged loss sits below the Jensen bound.
    pub fn jensen_gap(&self) -> f64 {
        self.bound_jensen - self.loss_merge
    }
}

/// Evaluates all four losses and both bounds for the equal-weight merge.
/// For the nonlinear family `jensen_holds` is an observation, not a guarantee;
/// read it together with `ctl_residual`.
pub fn prop1_verify(inst: &Prop1Instance) -> Result<Prop1Report> {
    let kind = inst.data.loss;
    if !kind.is_convex_in_output() {
        return Err(Error::Unsupported(format!(
            "{} is not convex in the model output",
            kind.name()
        )));
    }
    let merged = midpoint(&inst.theta_i, &inst.theta_j)?;
    let loss_pre = inst.data.loss_of(inst.family, &inst.theta_0, &inst.head)?;
    let loss_i = inst.data.loss_of(inst.family, &inst.theta_i, &inst.head)?;
    let loss_j = inst.data.loss_of(inst.family, &inst.theta_j, &inst.head)?;
    let loss_merge = inst.data.loss_of(inst.family, &merged, &inst.head)?;
    let ctl = ctl_residual(
        inst.family,
        &inst.theta_i,
        &inst.theta_j,
        &inst.head,
        &inst.data.inputs,
    )?;
    let eps = loss_pre - loss_i;
    let bound_jensen = 0.5 * loss_i + 0.5 * loss_j;
    let bound_disentangled = 0.5 * loss_pre + 0.5 * loss_j;
    Ok(Prop1Report {
        family: inst.family,
        ctl_residual: ctl,
        loss_pre,
        loss_i,
        loss_j,
        loss_merge,
        bound_jensen,
        jensen_holds: loss_merge <= bound_jensen + BOUND_TOLERANCE,
        bound_disentangled,
        bound_synergy: bound_disentangled - eps / 2.0,
        eps,
        classification: Interaction::from_eps(eps),
    })
}

/// `f(x; θ) = θx` with `x = 1`, `y = 1` under squared loss.
pub fn scalar_instance(theta_0: f64, theta_i: f64, theta_j: f64) -> Prop1Instance {
    let scalar = |w: f64| {
        vec![LayerParams::new(Matrix::from_vec(1, 1, vec![w]).unwrap(), vec![0.0]).unwrap()]
    };
    Prop1Instance {
        family: ModelFamily::Linear,
        theta_0: scalar(theta_0),
        theta_i: scalar(theta_i),
        theta_j: scalar(theta_j),
        head: LayerParams::new(Matrix::identity(1), vec![0.0]).unwrap(),
        data: EvalData {
            inputs: Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
            target: Target::Vectors(Matrix::from_vec(1, 1, vec![1.0]).unwrap()),
            loss: LossKind::L2,
        },
    }
}

/// Shape of a randomly drawn instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomInstanceSpec {
    pub family: ModelFamily,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub samples: usize,
    /// Task vectors are Gaussian with this per-entry scale.
    pub tau_scale: f64,
    pub loss: LossKind,
}

impl Default for RandomInstanceSpec {
    fn default() -> Self {
        RandomInstanceSpec {
            family: ModelFamily::Linear,
            input_dim: 5,
            hidden_dim: 4,
            output_dim: 3,
            samples: 32,
            tau_scale: 0.5,
            loss: LossKind::L2,
        }
    }
}

/// One encoder layer, a shared head and Gaussian data. Classification losses
/// get uniform random labels; vector losses get Gaussian targets.
pub fn random_instance(spec: &RandomInstanceSpec, seed_value: u64) -> Result<Prop1Instance> {
    use rand_distr::{Distribution, StandardNormal};
    if spec.samples == 0 || spec.input_dim == 0 || spec.hidden_dim == 0 || spec.output_dim == 0 {
        return Err(Error::invalid("instance dimensions must be positive"));
    }
    let mut rng = seed::named_rng(seed_value, "prop1/instance");
    let theta_0 = vec![LayerParams::random(
        spec.hidden_dim,
        spec.input_dim,
        &mut rng,
    )];
    let perturb = |base: &[LayerParams], rng: &mut seed::Rng| -> Vec<LayerParams> {
        base.iter()
            .map(|l| {
                let mut t = l.clone();
                t.weight
                    .as_mut_slice()
                    .iter_mut()
                    .chain(t.bias.iter_mut())
                    .for_each(|v| {
                        *v += spec.tau_scale * {
                            let z: f64 = StandardNormal.sample(rng);
                            z
                        }
                    });
                t
            })
            .collect()
    };
    let theta_i = perturb(&theta_0, &mut rng);
    let theta_j = perturb(&theta_0, &mut rng);
    let head = LayerParams::random(spec.output_dim, spec.hidden_dim, &mut rng);
    let inputs = Matrix::from_fn(spec.samples, spec.input_dim, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z
    });
    let target = match spec.loss {
        LossKind::CrossEntropyHard => {
            use rand::Rng as _;
            Target::Labels(
                (0..spec.samples)
                    .map(|_| rng.random_range(0..spec.output_dim))
                    .collect(),
            )
        }
        LossKind::CrossEntropySoft | LossKind::Kl => Target::Distributions(loss::softmax(
            &Matrix::from_fn(spec.samples, spec.output_dim, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z
            }),
        )),
        _ => Target::Vectors(Matrix::from_fn(spec.samples, spec.output_dim, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        })),
    };
    Ok(Prop1Instance {
        family: spec.family,
        theta_0,
        theta_i,
        theta_j,
        head,
        data: EvalData {
            inputs,
            target,
            loss: spec.loss,
        },
    })
}
