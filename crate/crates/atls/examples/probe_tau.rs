// Temporary diagnostic: post-conversion feature damage vs programming noise,
// isolated from analog trainer dynamics by fitting a digital head on the
// converted body's features.
use atls::checkpoint::load_model;
use atls::config::ExperimentConfig;
use atls::data::Split;
use atls::matrix::Matrix;
use atls::rng::derive_key;

fn features(model: &mut atls::network::ModelGraph, xs: &Matrix) -> Matrix {
    // The head's cached update inputs are the body's output features; a
    // zero backward pass populates the pair list without moving weights.
    let n = xs.rows();
    model.forward_batch(xs, true);
    model.backward_batch(&Matrix::zeros(n, 2));
    let head_idx = model.layers().len() - 1;
    let head = model.layers()[head_idx].as_linear().unwrap();
    let rows: Vec<Vec<f64>> = head.update_pairs().map(|(x, _)| x.to_vec()).collect();
    assert_eq!(rows.len(), n, "one cached feature row per sample");
    let d = rows[0].len();
    Matrix::from_fn(n, d, |i, j| rows[i][j])
}

fn head_error(ftr: &Matrix, labels: &[usize], fte: &Matrix, lte: &[usize]) -> f64 {
    // Full-batch logistic regression on frozen features.
    let (n, d) = (ftr.rows(), ftr.cols());
    let mut w = Matrix::zeros(2, d);
    let mut b = [0.0f64; 2];
    for _ in 0..300 {
        let mut gw = Matrix::zeros(2, d);
        let mut gb = [0.0f64; 2];
        for s in 0..n {
            let mut z = [0.0f64; 2];
            for k in 0..2 {
                let mut acc = b[k];
                for j in 0..d {
                    acc += w.get(k, j) * ftr.get(s, j);
                }
                z[k] = acc;
            }
            let m = z[0].max(z[1]);
            let e0 = (z[0] - m).exp();
            let e1 = (z[1] - m).exp();
            let sum = e0 + e1;
            for (k, ek) in [e0, e1].iter().enumerate() {
                let p = ek / sum - if labels[s] == k { 1.0 } else { 0.0 };
                gb[k] += p;
                for j in 0..d {
                    gw.set(k, j, gw.get(k, j) + p * ftr.get(s, j));
                }
            }
        }
        let lr = 0.5 / n as f64;
        for k in 0..2 {
            b[k] -= lr * gb[k];
            for j in 0..d {
                w.set(k, j, w.get(k, j) - lr * gw.get(k, j));
            }
        }
    }
    let mut wrong = 0usize;
    for s in 0..fte.rows() {
        let mut z = [0.0f64; 2];
        for k in 0..2 {
            let mut acc = b[k];
            for j in 0..fte.cols() {
                acc += w.get(k, j) * fte.get(s, j);
            }
            z[k] = acc;
        }
        let pred = if z[1] > z[0] { 1 } else { 0 };
        if pred != lte[s] {
            wrong += 1;
        }
    }
    100.0 * wrong as f64 / fte.rows() as f64
}

fn main() {
    let sets = [
        ("cal4", "/tmp/atls_smoke/cal4/pretrain.ckpt"),
        ("cal7-128", "/tmp/atls_smoke/cal7/pretrain.ckpt"),
        ("cal8-256", "/tmp/atls_smoke/cal8/pretrain.ckpt"),
        ("cal9-64^3", "/tmp/atls_smoke/cal9/pretrain.ckpt"),
        ("cal10-64^4", "/tmp/atls_smoke/cal10/pretrain.ckpt"),
        ("calb-64x8", "/tmp/atls_smoke/calb_64x8/pretrain.ckpt"),
        ("calb-32x8", "/tmp/atls_smoke/calb_32x8/pretrain.ckpt"),
    ];
    let text = std::fs::read_to_string("/tmp/atls_smoke/c7d.cfg").unwrap();
    let cfg = ExperimentConfig::parse(&text).unwrap();
    let fam = cfg.task.clone();
    let train = fam.finetune_split(Split::Train).unwrap();
    let test = fam.finetune_split(Split::Test).unwrap();

    println!("{:12} tau grid 0/.05/.1/.2/.4: median digital-head test error over 5 seeds", "arch");
    for (name, ckpt) in sets {
        if !std::path::Path::new(ckpt).exists() {
            continue;
        }
        print!("{name:12}");
        for tau in [0.0, 0.05, 0.1, 0.2, 0.4] {
            let mut errs = Vec::new();
            for rep in 0..5u64 {
                let mut model = load_model(
                    std::path::Path::new(ckpt),
                    &cfg.tile,
                    derive_key(&[1000, rep]),
                )
                .unwrap();
                model.replace_head(2, derive_key(&[7, rep])).unwrap();
                model
                    .convert_to_analog(&cfg.tile, tau, derive_key(&[55, rep]))
                    .unwrap();
                let ftr = features(&mut model, &train.inputs);
                let fte = features(&mut model, &test.inputs);
                errs.push(head_error(&ftr, &train.labels, &fte, &test.labels));
            }
            errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            print!("  {:5.1}", errs[2]);
        }
        println!();
    }
}
