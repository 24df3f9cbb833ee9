use aia_core::model::{build_model, forward, ntp_loss, special, Modality, Task, TokenSequence};
use aia_core::tasks::{sample_from_seed, sample_seed, task_model_config, SampleOptions, Split};

fn sample(task: Task, i: u64) -> TokenSequence {
    sample_from_seed(task, sample_seed(Split::Train, 3, i), SampleOptions::default())
}

#[test]
fn attention_rows_are_stochastic_and_causal() {
    let ckpt = build_model(&task_model_config()).unwrap();
    for task in Task::ALL {
        let (_, attn) = forward(&ckpt, &sample(task, 0), true).unwrap();
        let (row_dev, upper) = attn.unwrap().stochasticity_violation();
        assert!(row_dev < 1e-12, "{row_dev}");
        assert_eq!(upper, 0.0);
    }
}

#[test]
fn future_tokens_do_not_change_earlier_logits() {
    let ckpt = build_model(&task_model_config()).unwrap();
    let seq = sample(Task::Generation, 1);
    let (base, _) = forward(&ckpt, &seq, false).unwrap();
    let mut edited = seq.clone();
    let last_image = edited.modality.iter().rposition(|&m| m == Modality::Image).unwrap();
    let cfg = &ckpt.config;
    edited.ids[last_image] = if edited.ids[last_image] == cfg.image_id(0) { cfg.image_id(1) } else { cfg.image_id(0) };
    let (after, _) = forward(&ckpt, &edited, false).unwrap();
    for r in 0..last_image {
        assert_eq!(base.row(r), after.row(r), "row {r}");
    }
    assert_ne!(base.row(last_image), after.row(last_image));
}

#[test]
fn single_token_attends_to_itself() {
    let ckpt = build_model(&task_model_config()).unwrap();
    let seq = TokenSequence {
        task: Task::Generation,
        ids: vec![special::BOS],
        modality: vec![Modality::Special],
        loss_mask: vec![false],
    };
    let (logits, attn) = forward(&ckpt, &seq, true).unwrap();
    assert_eq!(logits.shape(), &[1, ckpt.config.vocab_size()]);
    for m in attn.unwrap().probs.iter().flatten() {
        assert_eq!(m.data(), &[1.0]);
    }
}

#[test]
fn forward_is_deterministic() {
    let a = build_model(&task_model_config()).unwrap();
    let b = build_model(&task_model_config()).unwrap();
    assert_eq!(a, b);
    let seq = sample(Task::Understanding, 2);
    let (la, pa) = forward(&a, &seq, true).unwrap();
    let (lb, pb) = forward(&b, &seq, true).unwrap();
    assert_eq!(la, lb);
    assert_eq!(pa, pb);
}

#[test]
fn initial_loss_is_near_uniform() {
    let ckpt = build_model(&task_model_config()).unwrap();
    let uniform = (ckpt.config.vocab_size() as f64).ln();
    for task in Task::ALL {
        let losses: Vec<f64> = (0..8)
            .map(|i| {
                let seq = sample(task, i);
                ntp_loss(&forward(&ckpt, &seq, false).unwrap().0, &seq).unwrap()
            })
            .collect();
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        assert!((mean / uniform - 1.0).abs() < 0.05, "{task}: {mean} vs ln V = {uniform}");
    }
}

#[test]
fn bad_sequences_are_rejected() {
    let ckpt = build_model(&task_model_config()).unwrap();
    let mut seq = sample(Task::Generation, 0);
    seq.ids[1] = 999;
    assert!(forward(&ckpt, &seq, false).is_err());
    let empty = TokenSequence { task: Task::Generation, ids: vec![], modality: vec![], loss_mask: vec![] };
    assert!(forward(&ckpt, &empty, false).is_err());
}
