//! Stage drivers end to end on small synthetic inputs.

use mesa::data::{generate_synthetic_sequence, FrameSequence, SceneSpec};
use mesa::finetune_eval::{nyu_metrics, run_finetune_stage, EvalConfig, FtConfig};
use mesa::geometric_pretrain::{run_gp_stage, GpConfig};
use mesa::masked_pretrain::{run_mp_stage, MaskSpec, MpConfig};
use mesa::networks::{Checkpoint, Model, ModelConfig, Stage, ENCODER};
use mesa::supervised_pretrain::{oracle_pseudo_depths, run_gp_sp_stage, GpSpConfig, LossBreakdown, LossWeights, NoiseSpec};
use mesa::train::Schedule;

fn small() -> ModelConfig {
    ModelConfig::narrow([8, 16, 32, 64], vec![16, 32, 64])
}

fn rooms(n: u64, frames: usize, size: usize) -> Vec<FrameSequence> {
    (0..n).map(|s| generate_synthetic_sequence(&SceneSpec::random_room(s, size, size, frames)).unwrap()).collect()
}

fn mp_cfg(steps: usize) -> MpConfig {
    MpConfig { schedule: Schedule { steps, lr: 1e-3, batch_size: 1 }, ..MpConfig::default() }
}

#[test]
fn mp_one_step_is_tagged_and_deterministic() {
    let imgs = rooms(1, 2, 32)[0].frames().to_vec();
    let a = run_mp_stage(&mp_cfg(1), Model::new(small(), 0), &imgs, &[]).unwrap();
    assert_eq!(a.checkpoint.meta.stage, Stage::Mp);
    assert_eq!(a.checkpoint.meta.chain, vec![Stage::Mp]);
    let runs: Vec<f64> = (0..2).map(|_| run_mp_stage(&mp_cfg(5), Model::new(small(), 0), &imgs, &[]).unwrap().heldout_end).collect();
    assert!((runs[0] - runs[1]).abs() <= 1e-5 * runs[0].abs());
}

#[test]
fn mp_overfits_a_single_image() {
    let img = rooms(1, 2, 32)[0].frames()[0].clone();
    let cfg = MpConfig {
        mask: MaskSpec { patch_size: 8, mask_ratio: 0.6, seed: 1 },
        schedule: Schedule { steps: 500, lr: 2e-3, batch_size: 1 },
        ..MpConfig::default()
    };
    let out = run_mp_stage(&cfg, Model::new(small(), 0), &[img.clone()], &[img]).unwrap();
    let last = *out.curve.column("loss").unwrap().last().unwrap();
    assert!(last < 0.05, "final masked loss {last}");
}

#[test]
fn gp_from_mp_keeps_encoder_and_fits_a_pair() {
    let seq = rooms(1, 2, 32);
    let mp = run_mp_stage(&mp_cfg(1), Model::new(small(), 0), seq[0].frames(), &[]).unwrap();
    let one = GpConfig { schedule: Schedule { steps: 1, lr: 1e-12, batch_size: 1 }, ..GpConfig::default() };
    let gp = run_gp_stage(&one, Some(mp.checkpoint.clone()), &small(), &seq, &seq, false).unwrap();
    assert_eq!(gp.checkpoint.meta.stage, Stage::Gp);
    assert_eq!(gp.checkpoint.meta.chain, vec![Stage::Mp, Stage::Gp]);
    for (name, t) in mp.checkpoint.params.iter().filter(|(n, _)| n.starts_with(ENCODER)) {
        let after = gp.checkpoint.params.get(name).unwrap();
        let drift = t.data().iter().zip(after.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(drift < 1e-6, "{name} moved by {drift}");
    }
    let long = GpConfig { schedule: Schedule { steps: 2000, lr: 1e-3, batch_size: 1 }, ..GpConfig::default() };
    let fit = run_gp_stage(&long, None, &small(), &seq, &seq, false).unwrap();
    assert!(fit.val_end < 0.5 * fit.val_start, "photometric {} -> {}", fit.val_start, fit.val_end);
}

fn gp_checkpoint(cfg: &ModelConfig) -> Checkpoint {
    Checkpoint::from_model(&Model::new(cfg.clone(), 0), Stage::Gp, vec![], 0)
}

#[test]
fn gp_sp_one_step_logs_all_terms() {
    let seqs = rooms(2, 3, 32);
    let pseudo = oracle_pseudo_depths(&seqs, &NoiseSpec::default()).unwrap();
    let cfg = GpSpConfig { schedule: Schedule { steps: 1, lr: 5e-4, batch_size: 2 }, ..GpSpConfig::default() };
    let out = run_gp_sp_stage(&cfg, gp_checkpoint(&small()), &small(), &seqs, &pseudo, &seqs, false).unwrap();
    assert_eq!(out.checkpoint.meta.stage, Stage::GpSp);
    let csv = out.curve.to_csv();
    let header = csv.lines().next().unwrap();
    assert_eq!(header, format!("step,{}", LossBreakdown::COLUMNS.join(",")));
    for line in csv.lines().skip(1) {
        assert_eq!(line.split(',').count(), 6);
        assert!(line.split(',').skip(1).all(|v| v.parse::<f64>().unwrap().is_finite()));
    }
}

#[test]
fn gp_sp_rejects_finetune_init() {
    let seqs = rooms(1, 2, 16);
    let cfg4 = ModelConfig::narrow([4, 8, 8, 16], vec![4, 8]);
    let pseudo = oracle_pseudo_depths(&seqs, &NoiseSpec::default()).unwrap();
    let ft = Checkpoint::from_model(&Model::new(cfg4.clone(), 0), Stage::Finetune, vec![], 0);
    let cfg = GpSpConfig { schedule: Schedule { steps: 1, lr: 5e-4, batch_size: 1 }, ..GpSpConfig::default() };
    assert!(run_gp_sp_stage(&cfg, ft, &cfg4, &seqs, &pseudo, &seqs, false).is_err());
}

#[test]
fn gp_sp_improves_validation_absrel() {
    let seqs = rooms(4, 4, 32);
    let pseudo = oracle_pseudo_depths(&seqs, &NoiseSpec::default()).unwrap();
    let cfg = GpSpConfig {
        weights: LossWeights { alpha: 1.0, beta: 0.5, gamma: 1.0, delta: 0.1, epsilon: 0.1 },
        schedule: Schedule { steps: 2000, lr: 5e-4, batch_size: 2 },
        ..GpSpConfig::default()
    };
    let out = run_gp_sp_stage(&cfg, gp_checkpoint(&small()), &small(), &seqs, &pseudo, &seqs, false).unwrap();
    assert!(out.val_absrel_end < out.val_absrel_start, "AbsRel {} -> {}", out.val_absrel_start, out.val_absrel_end);
}

#[test]
fn finetune_overfits_one_image_and_decays_lr() {
    let s = &rooms(1, 2, 32)[0];
    // sequences hold at least two frames, so the single labeled frame appears twice
    let (frame, depth) = (s.frames()[0].clone(), s.gt_depths().unwrap()[0].clone());
    let one = FrameSequence::new(vec![frame.clone(), frame], s.intrinsics(), Some(vec![depth.clone(), depth]), None).unwrap();
    let cfg = FtConfig { schedule: Schedule { steps: 1000, lr: 1e-3, batch_size: 1 }, silog_lambda: 0.0, ..FtConfig::default() };
    let out = run_finetune_stage(&cfg, None, &small(), &[one.clone()], false).unwrap();
    assert_eq!(out.checkpoint.meta.stage, Stage::Finetune);
    let lr = out.curve.column("lr").unwrap();
    assert_eq!(lr[0], cfg.schedule.lr);
    assert!((lr[lr.len() - 1] - cfg.min_lr).abs() < 1e-15);
    assert!(lr.windows(2).all(|w| w[1] <= w[0]));
    let pred = out.model.predict_depth(&one.frames()[0]).unwrap();
    let m = nyu_metrics(&pred, &one.gt_depths().unwrap()[0], &EvalConfig::default()).unwrap();
    assert!(m.rmse < 0.05, "rmse {}", m.rmse);
}
