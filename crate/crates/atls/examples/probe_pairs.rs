// Temporary diagnostic: which fine-tune class subset has margins fragile
// enough that conversion noise buries the discriminant.
use atls::checkpoint::load_model;
use atls::config::ExperimentConfig;
use atls::data::Split;
use atls::matrix::Matrix;
use atls::rng::derive_key;

fn features(model: &mut atls::network::ModelGraph, xs: &Matrix, k: usize) -> Matrix {
    let n = xs.rows();
    model.forward_batch(xs, true);
    model.backward_batch(&Matrix::zeros(n, k));
    let head_idx = model.layers().len() - 1;
    let head = model.layers()[head_idx].as_linear().unwrap();
    let rows: Vec<Vec<f64>> = head.update_pairs().map(|(x, _)| x.to_vec()).collect();
    let d = rows[0].len();
    Matrix::from_fn(n, d, |i, j| rows[i][j])
}

fn head_error(k: usize, ftr: &Matrix, labels: &[usize], fte: &Matrix, lte: &[usize]) -> f64 {
    let (n, d) = (ftr.rows(), ftr.cols());
    let mut w = Matrix::zeros(k, d);
    let mut b = vec![0.0f64; k];
    let mut z = vec![0.0f64; k];
    for _ in 0..300 {
        let mut gw = Matrix::zeros(k, d);
        let mut gb = vec![0.0f64; k];
        for s in 0..n {
            for c in 0..k {
                let mut acc = b[c];
                for j in 0..d {
                    acc += w.get(c, j) * ftr.get(s, j);
                }
                z[c] = acc;
            }
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for zc in z.iter_mut() {
                *zc = (*zc - m).exp();
                sum += *zc;
            }
            for c in 0..k {
                let p = z[c] / sum - if labels[s] == c { 1.0 } else { 0.0 };
                gb[c] += p;
                for j in 0..d {
                    gw.set(c, j, gw.get(c, j) + p * ftr.get(s, j));
                }
            }
        }
        let lr = 0.5 / n as f64;
        for c in 0..k {
            b[c] -= lr * gb[c];
            for j in 0..d {
                w.set(c, j, w.get(c, j) - lr * gw.get(c, j));
            }
        }
    }
    let mut wrong = 0usize;
    for s in 0..fte.rows() {
        let mut best = 0usize;
        let mut best_z = f64::NEG_INFINITY;
        for c in 0..k {
            let mut acc = b[c];
            for j in 0..fte.cols() {
                acc += w.get(c, j) * fte.get(s, j);
            }
            if acc > best_z {
                best_z = acc;
                best = c;
            }
        }
        if best != lte[s] {
            wrong += 1;
        }
    }
    100.0 * wrong as f64 / fte.rows() as f64
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = args
        .get(1)
        .map(String::as_str)
        .unwrap_or("/tmp/atls_smoke/cal7/pretrain.ckpt");
    let text = std::fs::read_to_string("/tmp/atls_smoke/c7g_base.cfg").unwrap();
    let cfg = ExperimentConfig::parse(&text).unwrap();

    let mut subsets: Vec<Vec<usize>> = Vec::new();
    for a in 0..10usize {
        for b in (a + 1)..10 {
            for c in (b + 1)..10 {
                for d in (c + 1)..10 {
                    for e in (d + 1)..10 {
                        subsets.push(vec![a, b, c, d, e]);
                    }
                }
            }
        }
    }

    println!("subset: err at tau 0 / 0.1 / 0.2 / 0.4  (median of 3 conversion seeds)");
    for sub in &subsets {
        let k = sub.len();
        let mut fam = cfg.task.clone();
        fam.finetune_subset = sub.clone();
        let train = fam.finetune_split(Split::Train).unwrap();
        let test = fam.finetune_split(Split::Test).unwrap();
        let mut out = Vec::new();
        for tau in [0.0, 0.1, 0.2, 0.4] {
            let mut errs = Vec::new();
            for rep in 0..3u64 {
                let mut model = load_model(
                    std::path::Path::new(ckpt),
                    &cfg.tile,
                    derive_key(&[1000, rep]),
                )
                .unwrap();
                model.replace_head(k, derive_key(&[7, rep])).unwrap();
                model
                    .convert_to_analog(&cfg.tile, tau, derive_key(&[55, rep]))
                    .unwrap();
                let ftr = features(&mut model, &train.inputs, k);
                let fte = features(&mut model, &test.inputs, k);
                errs.push(head_error(k, &ftr, &train.labels, &fte, &test.labels));
            }
            errs.sort_by(|x, y| x.partial_cmp(y).unwrap());
            out.push(errs[1]);
        }
        let elbow = out[3] - out[0];
        let flat = (out[1] - out[0]).abs();
        let mark = if elbow > 3.0 && flat < 1.5 && out[0] < 25.0 {
            "  <== candidate"
        } else {
            ""
        };
        println!(
            "{:?}: {:5.1} {:5.1} {:5.1} {:5.1}  rise {elbow:+5.1} flat {flat:4.1}{mark}",
            sub, out[0], out[1], out[2], out[3]
        );
    }
}
