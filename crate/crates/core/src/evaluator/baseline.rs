//! Single-flow logistic regression over one-hot tokens. Two-class softmax
//! with one class's logit pinned at zero, i.e. a sigmoid on the malicious
//! log-odds.

use std::collections::BTreeMap;

use log::warn;

use super::{Evaluation, FlowPredictions, MetricsReport};
use crate::discretizer::{DiscretizedFlow, Vocabulary};
use crate::error::{Error, Result};
use crate::flowset::TokenizedDataset;
use crate::ingest::BinaryLabel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineOptions {
    /// L2 penalty on token weights (not the bias).
    pub l2: f64,
    pub max_iterations: usize,
    /// Stop once the largest gradient component falls below this.
    pub tolerance: f64,
}

impl Default for BaselineOptions {
    fn default() -> Self {
        BaselineOptions {
            l2: 1e-4,
            max_iterations: 20_000,
            tolerance: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextFreeBaseline {
    /// Malicious log-odds contribution per (feature, token).
    pub weights: Vec<Vec<f64>>,
    pub bias: f64,
    /// Training data held a single class; predictions are that class.
    pub degenerate: Option<BinaryLabel>,
    pub iterations: usize,
    pub converged: bool,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Parameters live in one flat vector: per-feature token blocks, then the bias.
struct Objective<'a> {
    groups: &'a [(&'a DiscretizedFlow, f64, f64)],
    offsets: Vec<usize>,
    total: f64,
    l2: f64,
}

impl Objective<'_> {
    fn log_odds(&self, theta: &[f64], flow: &DiscretizedFlow) -> f64 {
        let bias = theta[theta.len() - 1];
        bias + flow
            .tokens
            .iter()
            .zip(&self.offsets)
            .map(|(&t, &o)| theta[o + t as usize])
            .sum::<f64>()
    }

    /// Mean negative log-likelihood plus penalty; writes the gradient.
    fn eval(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        grad.fill(0.0);
        let bias_at = theta.len() - 1;
        let mut loss = 0.0;
        for &(flow, benign, malicious) in self.groups {
            let z = self.log_odds(theta, flow);
            loss += malicious * softplus(-z) + benign * softplus(z);
            let dz = ((benign + malicious) * sigmoid(z) - malicious) / self.total;
            grad[bias_at] += dz;
            for (&t, &o) in flow.tokens.iter().zip(&self.offsets) {
                grad[o + t as usize] += dz;
            }
        }
        loss /= self.total;
        for (g, &w) in grad[..bias_at].iter_mut().zip(&theta[..bias_at]) {
            *g += self.l2 * w;
            loss += 0.5 * self.l2 * w * w;
        }
        loss
    }
}

impl ContextFreeBaseline {
    /// Fits the model by accelerated full-batch gradient descent on the mean
    /// log-loss, aggregated over distinct token tuples.
    pub fn train(
        vocab: &Vocabulary,
        flows: &[DiscretizedFlow],
        labels: &[BinaryLabel],
        opts: &BaselineOptions,
    ) -> Result<Self> {
        if flows.len() != labels.len() || flows.is_empty() {
            return Err(Error::Precondition(format!(
                "baseline needs labeled flows ({} flows, {} labels)",
                flows.len(),
                labels.len()
            )));
        }
        let sizes = vocab.total_sizes();
        let mut model = ContextFreeBaseline {
            weights: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            bias: 0.0,
            degenerate: None,
            iterations: 0,
            converged: false,
        };
        let malicious = labels.iter().filter(|&&l| l == BinaryLabel::Malicious).count();
        if malicious == 0 || malicious == labels.len() {
            let only = labels[0];
            warn!("baseline training data holds only {only} flows; the model always predicts {only}");
            model.degenerate = Some(only);
            model.converged = true;
            return Ok(model);
        }

        let mut tally: BTreeMap<&DiscretizedFlow, (f64, f64)> = BTreeMap::new();
        for (flow, &label) in flows.iter().zip(labels) {
            vocab.check_flow(flow)?;
            let e = tally.entry(flow).or_default();
            match label {
                BinaryLabel::Benign => e.0 += 1.0,
                BinaryLabel::Malicious => e.1 += 1.0,
            }
        }
        let groups: Vec<_> = tally.into_iter().map(|(f, (b, m))| (f, b, m)).collect();
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut dim = 0;
        for &n in &sizes {
            offsets.push(dim);
            dim += n;
        }
        let objective = Objective {
            groups: &groups,
            offsets,
            total: flows.len() as f64,
            l2: opts.l2,
        };

        // each example activates F weights plus the bias
        let step = 1.0 / (0.25 * (sizes.len() + 1) as f64 + opts.l2);
        let mut x = vec![0.0; dim + 1];
        let mut x_prev = x.clone();
        let mut y = x.clone();
        let mut grad = x.clone();
        let mut t = 1.0f64;
        let mut prev_loss = f64::INFINITY;
        for it in 0..opts.max_iterations {
            model.iterations = it + 1;
            let loss = objective.eval(&y, &mut grad);
            if grad.iter().all(|g| g.abs() < opts.tolerance) {
                x.clone_from(&y);
                model.converged = true;
                break;
            }
            // momentum restarts whenever the objective rises
            if loss > prev_loss {
                t = 1.0;
            }
            prev_loss = loss;
            std::mem::swap(&mut x, &mut x_prev);
            for ((xv, &yv), &g) in x.iter_mut().zip(&y).zip(&grad) {
                *xv = yv - step * g;
            }
            let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
            let beta = (t - 1.0) / t_next;
            for ((yv, &xv), &pv) in y.iter_mut().zip(&x).zip(&x_prev) {
                *yv = xv + beta * (xv - pv);
            }
            t = t_next;
        }
        for (w, &o) in model.weights.iter_mut().zip(&objective.offsets) {
            let n = w.len();
            w.copy_from_slice(&x[o..o + n]);
        }
        model.bias = x[dim];
        if !model.converged {
            warn!(
                "baseline stopped after {} iterations without reaching gradient tolerance {}",
                model.iterations, opts.tolerance
            );
        }
        Ok(model)
    }

    pub fn malicious_log_odds(&self, flow: &DiscretizedFlow) -> f64 {
        self.bias
            + flow
                .tokens
                .iter()
                .enumerate()
                .map(|(f, &t)| self.weights[f][t as usize])
                .sum::<f64>()
    }

    /// Ties go to Malicious, as for the sequence model.
    pub fn predict(&self, flow: &DiscretizedFlow) -> BinaryLabel {
        if let Some(only) = self.degenerate {
            return only;
        }
        if self.malicious_log_odds(flow) >= 0.0 {
            BinaryLabel::Malicious
        } else {
            BinaryLabel::Benign
        }
    }

    pub fn predict_all(&self, flows: &[DiscretizedFlow]) -> FlowPredictions {
        FlowPredictions {
            labels: flows.iter().map(|f| self.predict(f)).collect(),
            malicious_probability: flows
                .iter()
                .map(|f| match self.degenerate {
                    Some(BinaryLabel::Malicious) => 1.0,
                    Some(BinaryLabel::Benign) => 0.0,
                    None => sigmoid(self.malicious_log_odds(f)) as f32,
                })
                .collect(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>() + 1
    }

    pub fn describe(&self) -> String {
        format!(
            "context-free baseline: logistic regression on one-hot tokens of a single flow ({} parameters)",
            self.parameter_count()
        )
    }

    pub fn evaluate(&self, vocab: &Vocabulary, data: &TokenizedDataset) -> Result<Evaluation> {
        data.check_vocabulary(vocab)?;
        let predictions = self.predict_all(&data.flows);
        let counts = predictions.counts_against(&data.labels)?;
        let report = MetricsReport::new(&self.describe(), &data.source, &data.digest(), "none", counts)?;
        Ok(Evaluation { predictions, report })
    }
}
