use ssa_core::attention::{AttnConfig, AttnMode, BlockSelection};
use ssa_core::data::{windows, Sequence, TokenStream};
use ssa_core::eval::perplexity;
use ssa_core::gradcheck::{grad_check, GradCheckOptions};
use ssa_core::model::{shifted_targets, ForwardOptions, Model, ModelConfig};
use ssa_core::training::{TrainConfig, Trainer, WindowSampler};

fn tiny(s: usize, k: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        n_kv_heads: 1,
        head_dim: 8,
        attn: AttnConfig::new(s, k, AttnMode::Sparse, true).unwrap(),
        ..ModelConfig::default()
    }
}

fn periodic_rows(t: usize) -> Vec<Sequence> {
    let stream = TokenStream {
        tokens: (0..2000).map(|i| (i % 7) as u32 + 1).collect(),
        boundaries: vec![0],
    };
    windows(&stream, t, false).unwrap()
}

fn train_cfg(steps: u64, alpha: f64, p_full: f64) -> TrainConfig {
    TrainConfig {
        alpha,
        p_full,
        lr: 1e-2,
        total_steps: steps,
        warmup_steps: 5,
        batch_size: 4,
        seq_len: 16,
        seed: 3,
        weight_decay: 0.0,
        ..TrainConfig::default()
    }
}

fn run(model: Model<f32>, cfg: TrainConfig) -> (Trainer<f32>, Vec<(AttnMode, f64, f64)>) {
    let mut tr = Trainer::new(model, cfg).unwrap();
    let mut src = WindowSampler::new(periodic_rows(16), cfg.batch_size, cfg.seed).unwrap();
    let mut log = Vec::new();
    tr.run(&mut src, |_, r| {
        log.push((r.mode, r.ce, r.align));
        Ok(())
    })
    .unwrap();
    (tr, log)
}

#[test]
fn memorizes_a_periodic_stream() {
    let (tr, log) = run(
        Model::new(tiny(4, 2), 1).unwrap(),
        train_cfg(200, 10.0, 0.5),
    );
    assert!(log[0].1 > 3.0);
    let stream: Vec<u32> = (0..400).map(|i| (i % 7) as u32 + 1).collect();
    for mode in [AttnMode::Full, AttnMode::Sparse] {
        let ppl = perplexity(&tr.model, &stream, 16, mode, None).unwrap();
        assert!(ppl < 1.05, "{mode:?} ppl {ppl}");
    }
}

#[test]
fn identical_configs_give_identical_trajectories() {
    let cfg = train_cfg(30, 10.0, 0.5);
    let (_, a) = run(Model::new(tiny(4, 2), 2).unwrap(), cfg);
    let (_, b) = run(Model::new(tiny(4, 2), 2).unwrap(), cfg);
    assert_eq!(a, b);
    assert!(a.iter().any(|r| r.0 == AttnMode::Full) && a.iter().any(|r| r.0 == AttnMode::Sparse));
}

#[test]
fn full_only_without_alignment_never_routes_sparse() {
    let (_, log) = run(Model::new(tiny(4, 2), 4).unwrap(), train_cfg(25, 0.0, 1.0));
    assert!(log.iter().all(|r| r.0 == AttnMode::Full && r.2 == 0.0));
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let model = Model::<f64>::new(tiny(3, 2), 5).unwrap();
    let toks: Vec<u32> = (0..14).map(|i| ((i * 11 + 5) % 259) as u32).collect();
    let targets = shifted_targets(&toks);
    let alpha = 10.0;
    for mode in [AttnMode::Full, AttnMode::Sparse] {
        let probe = model
            .forward(&toks, None, ForwardOptions::new(mode).with_aux(true))
            .unwrap();
        let frozen = probe.frozen_pairs();
        let pinned: Vec<Vec<BlockSelection>> = probe
            .output
            .selections
            .into_iter()
            .map(Option::unwrap)
            .collect();
        let mut opts = ForwardOptions::new(mode).with_aux(true);
        opts.pinned = Some(&pinned);
        opts.frozen = Some(&frozen);
        let mut store = model.params.clone();
        let report = grad_check(
            &mut store,
            |p| {
                let f = model.forward_with(p, &toks, Some(&targets), opts)?;
                let mut g = f.graph;
                let weighted = g.scale(f.alignment.unwrap(), alpha);
                let loss = g.add(f.ce.unwrap(), weighted)?;
                Ok((g, loss))
            },
            GradCheckOptions {
                coords_per_param: 40,
                ..GradCheckOptions::default()
            },
        )
        .unwrap();
        assert_eq!(report.params.len(), model.params.len());
        assert!(
            report.max_rel_error() < 1e-3,
            "{mode:?}: {:?}",
            report.worst()
        );
    }
}
