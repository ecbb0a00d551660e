mod common;

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};
use tvlt::audio::{log_mel_spectrogram, mel_center_frequencies};
use tvlt::model::{decoder_calls, HeadKind};
use tvlt::numerics::{Graph, Tensor};
use tvlt::objectives::LossWeights;
use tvlt::trainer::*;
use tvlt::Error;

fn opts(steps: usize, seed: u64) -> TrainOptions {
    TrainOptions {
        steps,
        seed,
        ..TrainOptions::default()
    }
}

fn file_hashes(dir: &std::path::Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, hex::encode(Sha256::digest(std::fs::read(&p).unwrap())));
            }
        }
    }
    out
}

#[test]
fn regeneration_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_dataset(&common::dataset(1), a.path(), false).unwrap();
    write_dataset(&common::dataset(1), b.path(), false).unwrap();
    let (ha, hb) = (file_hashes(a.path()), file_hashes(b.path()));
    assert_eq!(ha.len(), 1 + 3 * 8);
    assert_eq!(ha, hb);
    let back = load_dataset(a.path()).unwrap();
    assert_eq!(back.manifest, common::dataset(1).manifest);
}

#[test]
fn empty_dataset_has_a_valid_manifest() {
    let ds = generate_synthetic_dataset(&SyntheticSpec {
        n_samples: 0,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path(), false).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert!(back.samples.is_empty());
    assert_eq!(back.manifest.format, DATASET_FORMAT);
}

/// Recovers the square's row band from pixels and the tone's mel bin from
/// the spectrogram, then checks both against the rule.
#[test]
fn correspondence_rule_inverts_from_both_sides() {
    let ds = common::dataset(5);
    let spec_cfg = &ds.manifest.spectrogram;
    for s in &ds.samples {
        let c = &s.clip;
        let rows: Vec<f64> = (0..c.height)
            .map(|y| (0..c.width).map(|x| c.pixel(0, y, x, 0) as f64).sum())
            .collect();
        let bright: Vec<usize> = (0..c.height).filter(|&y| rows[y] > 0.5 * c.width as f64 * 0.3).collect();
        let band = bright[0] / (c.height / BANDS);
        assert!(bright.iter().all(|&y| y / (c.height / BANDS) == band));
        assert_eq!(band, s.label.row_band);

        let spec = log_mel_spectrogram(&s.wave, spec_cfg).unwrap();
        let mid = spec.n_frames / 2;
        let frame = spec.frame(mid);
        let bin = (0..spec.n_mels).max_by(|&a, &b| frame[a].total_cmp(&frame[b])).unwrap();
        assert_eq!(bin, tone_bin(spec.n_mels, band, s.label.column));
        assert_eq!(bin, s.label.mel_bin);
        assert!((mel_center_frequencies(spec_cfg)[bin] - s.label.tone_hz).abs() < 1e-9);
    }
}

#[test]
fn vam_pass_sees_full_sequences_and_mae_pass_sees_visible_subsets() {
    let (cfg, data) = common::desk_data(2);
    let o = opts(1, 3);
    let batch = sample_batch(data.len(), o.batch_size, o.seed, 0).unwrap();
    let (pairs, plans) = step_inputs(&data, &batch, &o, 0).unwrap();
    let plans = plans.unwrap();
    let mut g = Graph::<f64>::new();
    let store = tvlt::model::init_params::<f64>(&cfg, 0).unwrap();
    let sg = build_step(&mut g, &store, &cfg, &data, &batch, pairs.as_ref(), Some(&plans), &o).unwrap();
    let full = 1 + data[0].vision.len() + data[0].audio.len();
    assert_eq!(sg.vam_seq_lens, vec![full; batch.len()]);
    for (len, plan) in sg.mae_seq_lens.iter().zip(&plans) {
        assert_eq!(*len, 1 + plan.vision.visible.len() + plan.audio.visible.len());
        assert!(*len < full);
    }
    assert_eq!(sg.masked_vision, plans.iter().map(|p| p.vision.masked.len()).sum::<usize>());
}

#[test]
fn zero_mae_weight_never_runs_the_decoder() {
    let (cfg, data) = common::desk_data(1);
    let before = decoder_calls();
    let o = TrainOptions {
        weights: LossWeights { vam: 1.0, mae: 0.0 },
        ..opts(3, 0)
    };
    pretrain(&cfg, &data, &o, |_| {}).unwrap();
    assert_eq!(decoder_calls(), before);
    let o = TrainOptions {
        objective: Objective::Vam,
        ..opts(2, 0)
    };
    pretrain(&cfg, &data, &o, |_| {}).unwrap();
    assert_eq!(decoder_calls(), before);
    pretrain(&cfg, &data, &opts(1, 0), |_| {}).unwrap();
    assert_eq!(decoder_calls(), before + 2 * data.len() as u64);
}

#[test]
fn fixed_seed_gives_identical_loss_logs() {
    let (cfg, data) = common::desk_data(1);
    let a = pretrain(&cfg, &data, &opts(6, 11), |_| {}).unwrap();
    let b = pretrain(&cfg, &data, &opts(6, 11), |_| {}).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.checkpoint.params, b.checkpoint.params);
    let c = pretrain(&cfg, &data, &opts(6, 12), |_| {}).unwrap();
    assert_ne!(a.log, c.log);
}

#[test]
fn nan_loss_aborts_with_step_and_lr() {
    let (cfg, data) = common::desk_data(1);
    let mut ckpt = pretrain(&cfg, &data, &opts(0, 0), |_| {}).unwrap().checkpoint;
    let w = ckpt.params.get_mut("vam_head.bias").unwrap();
    *w = Tensor::full(&[1], f32::NAN);
    let err = continue_pretraining(ckpt, &data, &opts(5, 0), |_| {}).unwrap_err();
    match err {
        Error::NanLoss { step, lr } => {
            assert_eq!(step, 0);
            assert_eq!(lr, opts(5, 0).hyper.lr);
        }
        e => panic!("unexpected {e:?}"),
    }
}

#[test]
fn single_sample_is_a_batch_size_error() {
    let (cfg, data) = common::desk_data(1);
    let err = pretrain(&cfg, &data[..1], &opts(1, 0), |_| {}).unwrap_err();
    assert!(matches!(err, Error::BatchSize(1)));
    assert!(matches!(pretrain(&cfg, &[], &opts(1, 0), |_| {}), Err(Error::Contract(_))));
}

#[test]
fn label_head_mismatch_is_a_config_error() {
    let (cfg, data) = common::desk_data(1);
    let ckpt = pretrain(&cfg, &data, &opts(0, 0), |_| {}).unwrap().checkpoint;
    let cases = [
        (HeadKind::Regression, TaskTargets::Pairs),
        (HeadKind::MultiLabel { classes: 2 }, TaskTargets::from_labels(&HeadKind::MultiLabel { classes: 4 }, &data)),
        (HeadKind::Matching, TaskTargets::Values(vec![0.0; 8])),
        (HeadKind::Regression, TaskTargets::Values(vec![0.0; 3])),
    ];
    for (head, t) in cases {
        let o = FinetuneOptions {
            head,
            steps: 1,
            ..FinetuneOptions::default()
        };
        assert!(matches!(finetune(&ckpt, &data, &t, &o, |_| {}), Err(Error::Config(_))), "{head}");
    }
}

#[test]
fn regression_head_fits_a_constant() {
    let (cfg, data) = common::desk_data(1);
    let ckpt = pretrain(&cfg, &data, &opts(0, 0), |_| {}).unwrap().checkpoint;
    let c = 0.7;
    let t = TaskTargets::Values(vec![c; data.len()]);
    let o = FinetuneOptions {
        head: HeadKind::Regression,
        steps: 150,
        ..FinetuneOptions::default()
    };
    let ft = finetune(&ckpt, &data, &t, &o, |_| {}).unwrap();
    for s in &data {
        let p = head_scores(&ft.checkpoint, s, s).unwrap()[0];
        assert!((p - c).abs() <= 0.05, "{p}");
    }
    let m = evaluate_head(&ft.checkpoint, &data, &t).unwrap();
    assert_eq!(m.a2, Some(1.0));
}

#[test]
fn multi_label_head_learns_row_bands() {
    let (cfg, data) = common::desk_data(1);
    let ckpt = pretrain(&cfg, &data, &opts(0, 0), |_| {}).unwrap().checkpoint;
    let head = HeadKind::MultiLabel { classes: BANDS };
    let t = TaskTargets::from_labels(&head, &data);
    let o = FinetuneOptions {
        head,
        steps: 150,
        ..FinetuneOptions::default()
    };
    let ft = finetune(&ckpt, &data, &t, &o, |_| {}).unwrap();
    let m = evaluate_head(&ft.checkpoint, &data, &t).unwrap();
    assert_eq!(m.accuracy, Some(1.0));
    assert!(ft.log.last().unwrap().loss < ft.log[0].loss);
}

#[test]
fn retrieval_metrics_are_monotone_rates() {
    let (cfg, data) = common::desk_data(1);
    let ckpt = pretrain(&cfg, &data, &opts(0, 0), |_| {}).unwrap().checkpoint;
    let o = FinetuneOptions {
        steps: 2,
        ..FinetuneOptions::default()
    };
    let ft = finetune(&ckpt, &data, &TaskTargets::Pairs, &o, |_| {}).unwrap();
    let m = evaluate_retrieval(&ft.checkpoint, &data, &[1, 5, 10]).unwrap();
    assert!(m.recall[&1] <= m.recall[&5] && m.recall[&5] <= m.recall[&10]);
    assert!(m.recall.values().all(|r| (0.0..=1.0).contains(r)));
    assert!(matches!(evaluate_retrieval(&ckpt, &data, &[1]), Err(Error::Config(_))));
}

/// Combined loss at the last step beats step 10 in at least 19 of 20 seeds.
#[test]
fn loss_decreases_on_the_overfit_task() {
    let (cfg, data) = common::desk_data(1);
    let wins = (0..20)
        .filter(|&seed| {
            let log = pretrain(&cfg, &data, &opts(300, seed), |_| {}).unwrap().log;
            log[299].combined < log[10].combined
        })
        .count();
    assert!(wins >= 19, "{wins}/20");
}
