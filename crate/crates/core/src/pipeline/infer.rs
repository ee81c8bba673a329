use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::session::{finetune, pretrain};
use crate::arch::{backbone_forward, plm_forward};
use crate::degrade::CleanSource;
use crate::error::{dim_err, Result};
use crate::metrics::{evaluate_set, EvalReport};
use crate::params::ParameterStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use std::fmt::Write as _;

fn check_input(ckpt: &Checkpoint, image: &Tensor<f64>) -> Result<()> {
    match *image.shape() {
        [3, h, w] => ckpt.model.tokens(h, w).map(|_| ()),
        ref s => dim_err(format!("expected an RGB image [3, H, W], got {s:?}")),
    }
}

fn run_backbone(tape: &mut Tape<f64>, ckpt: &Checkpoint, net: &ParameterStore<f64>, image: Var, prior_input: Var) -> Result<Var> {
    let th = net.bind_frozen(tape);
    let pl = ckpt.plm.bind_frozen(tape);
    let q = plm_forward(tape, &pl, prior_input, &ckpt.model)?;
    Ok(backbone_forward(tape, &th, image, q, &ckpt.model)?.out)
}

/// φ's estimate of the clean image, with priors from the degraded input
/// itself. Without φ the degraded image stands in.
pub fn pseudo_gt(ckpt: &Checkpoint, image: &Tensor<f64>) -> Result<Tensor<f64>> {
    check_input(ckpt, image)?;
    let Some(phi) = &ckpt.phi else {
        return Ok(image.detached());
    };
    let mut tape = Tape::new();
    let x = tape.constant(image.detached());
    let out = run_backbone(&mut tape, ckpt, phi, x, x)?;
    Ok(tape.value(out).detached())
}

/// Restores a degraded image: θ conditioned on priors of φ's pseudo-GT,
/// clipped to `[0, 1]`.
pub fn restore_image(ckpt: &Checkpoint, image: &Tensor<f64>) -> Result<Tensor<f64>> {
    let pseudo = pseudo_gt(ckpt, image)?;
    let mut tape = Tape::new();
    let x = tape.constant(image.detached());
    let p = tape.constant(pseudo);
    let out = run_backbone(&mut tape, ckpt, &ckpt.theta, x, p)?;
    Ok(tape.value(out).clamp(0.0, 1.0))
}

/// Scratch vs pre-trained fine-tuning on one task, evaluated on the task's
/// fixed evaluation set.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub task: String,
    pub scratch: EvalReport,
    pub pretrained: EvalReport,
    /// The two fine-tuned models that were evaluated.
    pub scratch_model: Checkpoint,
    pub pretrained_model: Checkpoint,
}

impl Comparison {
    pub fn delta_psnr(&self) -> f64 {
        self.pretrained.mean_psnr() - self.scratch.mean_psnr()
    }

    pub fn delta_ssim(&self) -> f64 {
        self.pretrained.mean_ssim() - self.scratch.mean_ssim()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,arm,images,input_psnr,psnr,ssim\n");
        for (arm, r) in [("scratch", &self.scratch), ("pretrained", &self.pretrained)] {
            writeln!(
                s,
                "{},{arm},{},{:.6},{:.6},{:.6}",
                self.task,
                r.count(),
                r.mean_input_psnr(),
                r.mean_psnr(),
                r.mean_ssim()
            )
            .expect("writing to a String");
        }
        writeln!(s, "{},delta,,,{:.6},{:.6}", self.task, self.delta_psnr(), self.delta_ssim()).expect("writing to a String");
        s
    }
}

/// Fine-tunes (a) fresh weights and (b) a pre-trained model on `task` with
/// the same budget and data stream, then evaluates both. `pretrained` is
/// produced by [`pretrain`] when not supplied.
pub fn compare_pretrain_effect(cfg: &TrainConfig, task: &str, pretrained: Option<Checkpoint>) -> Result<Comparison> {
    cfg.validate()?;
    cfg.tasks.get(task)?;
    let pre = match pretrained {
        Some(c) => c,
        None => pretrain(cfg)?.0,
    };
    let scratch = Checkpoint::init(&cfg.model, cfg.seed);
    let (scratch, _) = finetune(cfg, scratch, task)?;
    let (pre, _) = finetune(cfg, pre, task)?;
    let source = match &cfg.clean_dir {
        Some(dir) => CleanSource::from_dir(dir)?,
        None => CleanSource::Synthetic,
    };
    let pairs = cfg.tasks.eval_pairs(task, cfg.eval_images, cfg.height, cfg.width, &source)?;
    Ok(Comparison {
        task: task.to_string(),
        scratch: evaluate_set(&scratch, &pairs)?,
        pretrained: evaluate_set(&pre, &pairs)?,
        scratch_model: scratch,
        pretrained_model: pre,
    })
}
