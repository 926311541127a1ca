use super::{linf, probe, project, sign, start_point, AttackConfig, AttackMethod, AttackResult, Probe, StepTrace};
use crate::data::Label;
use crate::error::Result;
use crate::models::Classifier;

struct Run<'a, M: Classifier + ?Sized> {
    model: &'a M,
    label: Label,
    config: &'a AttackConfig,
    trace: Vec<StepTrace>,
}

impl<'a, M: Classifier + ?Sized> Run<'a, M> {
    fn new(model: &'a M, label: Label, config: &'a AttackConfig) -> Self {
        Self {
            model,
            label,
            config,
            trace: Vec::new(),
        }
    }

    fn eval(&mut self, x: &[f64]) -> Result<Probe> {
        let p = probe(self.model, x, self.label, self.config.loss, self.config.precision)?;
        self.trace.push(StepTrace {
            step: self.trace.len(),
            loss: p.loss,
            max_abs_grad: p.max_abs_grad(),
            confidence: p.confidence,
        });
        Ok(p)
    }

    /// Replays the last evaluation; used once an iterate is a fixed point,
    /// where every further evaluation would be identical.
    fn repeat_last(&mut self, times: usize) {
        if let Some(last) = self.trace.last().cloned() {
            for _ in 0..times {
                self.trace.push(StepTrace {
                    step: self.trace.len(),
                    ..last.clone()
                });
            }
        }
    }

    fn finish(self, origin: &[f64], x: Vec<f64>, p: &Probe) -> AttackResult {
        AttackResult {
            linf: linf(&x, origin),
            success: p.misclassified(self.label),
            adversarial: x,
            trace: self.trace,
            loss: p.loss,
        }
    }
}

fn signed_step(x: &[f64], direction: &[f64], size: f64, origin: &[f64], epsilon: f64) -> Vec<f64> {
    let mut out: Vec<f64> = x
        .iter()
        .zip(direction)
        .map(|(&v, &g)| v + size * sign(g))
        .collect();
    project(&mut out, origin, epsilon);
    out
}

/// Dispatches on `config.method`.
pub fn attack<M: Classifier + ?Sized>(
    model: &M,
    image: &[f64],
    label: Label,
    config: &AttackConfig,
) -> Result<AttackResult> {
    match config.method {
        AttackMethod::Fgsm => fgsm(model, image, label, config),
        AttackMethod::Pgd => pgd(model, image, label, config),
        AttackMethod::Mim => mim(model, image, label, config),
        AttackMethod::Apgd => apgd(model, image, label, config),
    }
}

/// One signed-gradient step of size epsilon.
pub fn fgsm<M: Classifier + ?Sized>(
    model: &M,
    image: &[f64],
    label: Label,
    config: &AttackConfig,
) -> Result<AttackResult> {
    config.validate()?;
    let mut run = Run::new(model, label, config);
    let p0 = run.eval(image)?;
    let x = signed_step(image, &p0.grad, config.epsilon, image, config.epsilon);
    let p = probe(model, &x, label, config.loss, config.precision)?;
    Ok(run.finish(image, x, &p))
}

/// Projected signed-gradient ascent; the same loop as [`mim`] with no
/// momentum.
pub fn pgd<M: Classifier + ?Sized>(
    model: &M,
    image: &[f64],
    label: Label,
    config: &AttackConfig,
) -> Result<AttackResult> {
    iterate(model, image, label, config, None)
}

/// Momentum iterative method: `g <- mu g + grad / |grad|_1`, step along
/// `sign(g)`.
pub fn mim<M: Classifier + ?Sized>(
    model: &M,
    image: &[f64],
    label: Label,
    config: &AttackConfig,
) -> Result<AttackResult> {
    iterate(model, image, label, config, Some(config.momentum_decay))
}

fn iterate<M: Classifier + ?Sized>(
    model: &M,
    image: &[f64],
    label: Label,
    config: &AttackConfig,
    momentum: Option<f64>,
) -> Result<AttackResult> {
    config.validate()?;
    let mut run = Run::new(model, label, config);
    let mut x = start_point(image, config);
    let mut acc = vec![0.0; image.len()];
    let mut p = run.eval(&x)?;
    for step in 0..config.steps {
        if config.stop_on_success && p.misclassified(label) {
            break;
        }
        let acc_before = momentum.map(|_| acc.clone());
        let direction = match momentum {
            None => &p.grad,
            Some(mu) => {
                let l1: f64 = p.grad.iter().map(|g| g.abs()).sum();
                let scale = if l1 > 0.0 && l1.is_finite() { 1.0 / l1 } else { 1.0 };
                for (a, g) in acc.iter_mut().zip(&p.grad) {
                    *a = mu * *a + g * scale;
                }
                &acc
            }
        };
        let next = signed_step(&x, direction, config.step_size, image, config.epsilon);
        let fixed = next == x && acc_before.is_none_or(|a| a == acc);
        if fixed {
            run.repeat_last(config.steps - step);
            break;
        }
        x = next;
        p = run.eval(&x)?;
    }
    Ok(run.finish(image, x, &p))
}

/// Checkpoint iterations of APGD for `steps` iterations.
pub fn apgd_checkpoints(steps: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let (mut prev, mut cur) = (0.0f64, 0.22f64);
    loop {
        // the tolerance keeps e.g. 0.22 * 100 from rounding up to 23
        let w = (cur * steps as f64 - 1e-9).ceil() as usize;
        if w >= steps {
            break;
        }
        if out.last() != Some(&w) && w > 0 {
            out.push(w);
        }
        let next = cur + (cur - prev - 0.03).max(0.06);
        prev = cur;
        cur = next;
    }
    out
}

/// Auto-PGD: momentum ascent with step halving at checkpoints and restart
/// from the best point. Returns the best point seen (or the first
/// misclassified iterate under `stop_on_success`).
pub fn apgd<M: Classifier + ?Sized>(
    model: &M,
    image: &[f64],
    label: Label,
    config: &AttackConfig,
) -> Result<AttackResult> {
    config.validate()?;
    let alpha = config.apgd_alpha;
    let eps = config.epsilon;
    let checkpoints = apgd_checkpoints(config.steps);
    let mut run = Run::new(model, label, config);

    let x0 = start_point(image, config);
    let p0 = run.eval(&x0)?;
    if config.stop_on_success && p0.misclassified(label) {
        return Ok(run.finish(image, x0, &p0));
    }
    let mut eta = 2.0 * eps;
    let x1 = signed_step(&x0, &p0.grad, eta, image, eps);
    let p1 = run.eval(&x1)?;

    let mut increases = usize::from(p1.loss > p0.loss);
    let (mut best_x, mut best_p) = if p1.loss > p0.loss {
        (x1.clone(), p1.clone())
    } else {
        (x0.clone(), p0.clone())
    };
    let (mut x_prev, mut x_cur, mut p_cur) = (x0, x1, p1);
    // state at the previous checkpoint: (iteration, eta, best loss)
    let mut last_check = (0usize, eta, best_p.loss);

    for k in 1..config.steps {
        if config.stop_on_success && p_cur.misclassified(label) {
            return Ok(run.finish(image, x_cur, &p_cur));
        }
        let frozen = p_cur.grad.iter().all(|&g| sign(g) == 0.0);
        if frozen && x_prev == x_cur && best_x == x_cur {
            run.repeat_last(config.steps - k);
            break;
        }
        let z = signed_step(&x_cur, &p_cur.grad, eta, image, eps);
        let mut next: Vec<f64> = x_cur
            .iter()
            .zip(&z)
            .zip(&x_prev)
            .map(|((&c, &zi), &pv)| c + alpha * (zi - c) + (1.0 - alpha) * (c - pv))
            .collect();
        project(&mut next, image, eps);
        let p_next = run.eval(&next)?;
        if p_next.loss > p_cur.loss {
            increases += 1;
        }
        if p_next.loss > best_p.loss {
            best_x = next.clone();
            best_p = p_next.clone();
        }
        x_prev = std::mem::replace(&mut x_cur, next);
        p_cur = p_next;

        if checkpoints.contains(&k) {
            let (w_prev, eta_prev, best_prev) = last_check;
            let few_increases = (increases as f64) < config.apgd_rho * (k - w_prev) as f64;
            let stalled = eta_prev == eta && best_prev == best_p.loss;
            last_check = (k, eta, best_p.loss);
            if few_increases || stalled {
                eta /= 2.0;
                x_cur = best_x.clone();
                x_prev = best_x.clone();
                p_cur = best_p.clone();
            }
            increases = 0;
        }
    }
    if config.stop_on_success && p_cur.misclassified(label) {
        return Ok(run.finish(image, x_cur, &p_cur));
    }
    Ok(run.finish(image, best_x, &best_p))
}
