// Temporary diagnostic: track body weight fidelity during analog fine-tuning.
use atls::checkpoint::load_model;
use atls::config::ExperimentConfig;
use atls::data::Split;
use atls::matrix::Matrix;
use atls::rng::{derive_key, StreamRng};
use atls::trainer::{Trainer, TrainerKind};

fn cosine(a: &Matrix, b: &Matrix) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.data().iter().zip(b.data()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na.sqrt() * nb.sqrt())
}

fn main() {
    let text = std::fs::read_to_string("/tmp/atls_smoke/cal4_ana.cfg").unwrap();
    let cfg = ExperimentConfig::parse(&text).unwrap();
    let fam = cfg.task.clone();
    let train = fam.finetune_split(Split::Train).unwrap();
    let test = fam.finetune_split(Split::Test).unwrap();

    for mode in ["tl", "scratch"] {
        let seed = derive_key(&[cfg.run.seed, 0, 0]);
        let mut model = if mode == "tl" {
            let mut m = load_model(
                std::path::Path::new("/tmp/atls_smoke/cal4/pretrain.ckpt"),
                &cfg.tile,
                derive_key(&[seed, 10]),
            )
            .unwrap();
            m.replace_head(2, derive_key(&[seed, 1])).unwrap();
            m
        } else {
            atls::network::build_mlp(&[32, 32, 2], derive_key(&[seed, 0])).unwrap()
        };
        model
            .convert_to_analog(&cfg.tile, cfg.trainer.tau, derive_key(&[seed, 2]))
            .unwrap();
        let body0 = model.layers()[0].as_linear().unwrap().weights_clean();
        let s0 = model.layers()[0].as_linear().unwrap().out_scale();
        let head0 = model.layers()[2].as_linear().unwrap().weights_clean();
        println!("== {mode}: body out_scale {s0:.3}, body std {:.3}", body0.std());

        let mut trainer = Trainer::new(
            TrainerKind::Cttv2,
            cfg.trainer.train.clone(),
            &cfg.tile,
            &mut model,
            derive_key(&[seed, 3]),
        )
        .unwrap();
        let mut rng = StreamRng::new(derive_key(&[seed, 4]));
        let nb = train.inputs.rows().div_ceil(cfg.trainer.train.batch_size);
        for epoch in 1..=120 {
            let mut perm: Vec<usize> = (0..train.inputs.rows()).collect();
            rng.shuffle(&mut perm);
            for b in 0..nb {
                let idx = &perm[b * cfg.trainer.train.batch_size..((b + 1) * cfg.trainer.train.batch_size).min(perm.len())];
                let xs = Matrix::from_fn(idx.len(), train.inputs.cols(), |i, j| {
                    train.inputs.get(idx[i], j)
                });
                let ys: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
                trainer.step(&mut model, &xs, &ys).unwrap();
            }
            if epoch % 15 == 0 || epoch <= 2 {
                let body = model.layers()[0].as_linear().unwrap().weights_clean();
                let head = model.layers()[2].as_linear().unwrap().weights_clean();
                let (err, _) = atls::network::evaluate(&mut model, &test.inputs, &test.labels).unwrap();
                println!(
                    "ep {epoch:2}: test {err:5.1}%  body std {:.3} cos {:.3}  head std {:.3} cos {:.3}",
                    body.std(),
                    cosine(&body, &body0),
                    head.std(),
                    cosine(&head, &head0),
                );
                for (name, idx) in [("body", 0usize), ("head", 1usize)] {
                    if let Some((rs, tb, mh, xh)) = trainer.debug_transfer(idx) {
                        println!(
                            "      {name}: running_scale {rs:.2e} theta {:.2e} mean|H| {mh:.2e} max|H| {xh:.2e}",
                            tb * rs
                        );
                    }
                }
            }
        }
    }
}
