//! Synthetic classification tasks with a shared feature structure, so that
//! pretraining on one task genuinely helps fine-tuning on another.
//!
//! A frozen random teacher network defines everything: inputs are drawn from
//! a Gaussian mixture, the pretraining labels are the argmax of the teacher
//! head over its tanh features, and the fine-tuning labels are the argmax of
//! a fresh head over the same features. Both tasks are exactly linear in the
//! teacher features, which gives the transfer story teeth and gives tests a
//! Bayes-error oracle: a linear probe on the true features can solve either
//! task.
//!
//! Datasets can round-trip through a plain `label,x0,x1,...` CSV; the loader
//! min-max scales each feature column to [0, 1] and densely re-indexes the
//! kept labels in ascending order.

use std::path::Path;

use crate::error::{AtlsError, Result};
use crate::matrix::Matrix;
use crate::rng::{derive_key, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskFamily {
    pub input_dim: usize,
    /// Classes in the pretraining task; also the number of mixture centers.
    pub pretrain_classes: usize,
    /// Names the fine-tuning task variant. Its length sets the class count
    /// and its values seed the fresh labeling head.
    pub finetune_subset: Vec<usize>,
    pub samples_per_class_train: usize,
    pub samples_per_class_test: usize,
    /// Spread of each mixture component around its center.
    pub noise_std: f64,
    /// Gaussian augmentation added to training batches; zero disables it.
    pub jitter_std: f64,
    pub teacher_seed: u64,
    pub teacher_hidden: usize,
}

impl Default for TaskFamily {
    fn default() -> Self {
        TaskFamily {
            input_dim: 8,
            pretrain_classes: 6,
            finetune_subset: vec![0, 1],
            samples_per_class_train: 64,
            samples_per_class_test: 32,
            noise_std: 0.5,
            jitter_std: 0.0,
            teacher_seed: 7,
            teacher_hidden: 16,
        }
    }
}

impl TaskFamily {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(AtlsError::invalid("task.input_dim must be >= 1"));
        }
        if self.pretrain_classes < 2 {
            return Err(AtlsError::invalid("task.pretrain_classes must be >= 2"));
        }
        if self.teacher_hidden == 0 {
            return Err(AtlsError::invalid("task.teacher_hidden must be >= 1"));
        }
        if self.samples_per_class_train == 0 || self.samples_per_class_test == 0 {
            return Err(AtlsError::invalid("task sample counts must be >= 1"));
        }
        if !(self.noise_std.is_finite() && self.noise_std > 0.0) {
            return Err(AtlsError::invalid(format!(
                "task.noise_std must be > 0, got {}",
                self.noise_std
            )));
        }
        if !(self.jitter_std.is_finite() && self.jitter_std >= 0.0) {
            return Err(AtlsError::invalid(format!(
                "task.jitter_std must be >= 0, got {}",
                self.jitter_std
            )));
        }
        if self.finetune_subset.len() < 2 {
            return Err(AtlsError::invalid(
                "task.finetune_subset needs at least 2 entries",
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for &c in &self.finetune_subset {
            if c >= self.pretrain_classes {
                return Err(AtlsError::invalid(format!(
                    "task.finetune_subset entry {c} out of range for {} pretrain classes",
                    self.pretrain_classes
                )));
            }
            if !seen.insert(c) {
                return Err(AtlsError::invalid(format!(
                    "task.finetune_subset entry {c} repeated"
                )));
            }
        }
        Ok(())
    }

    pub fn finetune_classes(&self) -> usize {
        self.finetune_subset.len()
    }

    pub fn teacher(&self) -> Result<Teacher> {
        self.validate()?;
        Ok(Teacher::new(self))
    }

    pub fn pretrain_split(&self, split: Split) -> Result<Dataset> {
        let teacher = self.teacher()?;
        let mut rng = StreamRng::new(derive_key(&[self.teacher_seed, 1, split.tag()]));
        let per_class = self.per_class(split);
        let (inputs, labels) = fill_exact(
            &teacher,
            &|t, x| t.pretrain_label(x),
            self.pretrain_classes,
            per_class,
            &mut rng,
        )?;
        Ok(Dataset {
            inputs,
            labels,
            class_count: self.pretrain_classes,
        })
    }

    pub fn finetune_split(&self, split: Split) -> Result<Dataset> {
        let teacher = self.teacher()?;
        let mut rng = StreamRng::new(derive_key(&[self.teacher_seed, 2, split.tag()]));
        let per_class = self.per_class(split);
        let (inputs, labels) = fill_exact(
            &teacher,
            &|t, x| t.finetune_label(x),
            self.finetune_classes(),
            per_class,
            &mut rng,
        )?;
        Ok(Dataset {
            inputs,
            labels,
            class_count: self.finetune_classes(),
        })
    }

    fn per_class(&self, split: Split) -> usize {
        match split {
            Split::Train => self.samples_per_class_train,
            Split::Test => self.samples_per_class_test,
        }
    }
}

/// The frozen random network that defines both tasks.
pub struct Teacher {
    /// hidden x input projection.
    proj: Matrix,
    hidden_bias: Vec<f64>,
    /// pretrain_classes x hidden labeling head.
    head: Matrix,
    /// finetune classes x hidden labeling head, seeded by the subset.
    fine_head: Matrix,
    /// One mixture center per pretraining class, pretrain_classes x input.
    centers: Matrix,
    noise_std: f64,
}

impl Teacher {
    fn new(family: &TaskFamily) -> Teacher {
        let d = family.input_dim;
        let h = family.teacher_hidden;
        let k = family.pretrain_classes;
        let mut rng = StreamRng::new(derive_key(&[family.teacher_seed, 0]));
        // Projection scale keeps tanh inputs order-one for unit-scale x, so
        // the features are neither linear nor saturated.
        let scale = 1.5 / (d as f64).sqrt();
        let proj = Matrix::from_fn(h, d, |_, _| scale * rng.normal());
        let hidden_bias: Vec<f64> = (0..h).map(|_| 0.3 * rng.normal()).collect();
        let head = Matrix::from_fn(k, h, |_, _| rng.normal());
        let centers = Matrix::from_fn(k, d, |_, _| rng.normal());
        let mut fine_parts = vec![family.teacher_seed, 3];
        fine_parts.extend(family.finetune_subset.iter().map(|&c| c as u64));
        let mut fine_rng = StreamRng::new(derive_key(&fine_parts));
        let fine_head =
            Matrix::from_fn(family.finetune_classes(), h, |_, _| fine_rng.normal());
        Teacher {
            proj,
            hidden_bias,
            head,
            fine_head,
            centers,
            noise_std: family.noise_std,
        }
    }

    /// The tanh feature vector both labeling heads act on.
    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        let mut f = self.proj.matvec(x);
        for (v, b) in f.iter_mut().zip(&self.hidden_bias) {
            *v = (*v + b).tanh();
        }
        f
    }

    pub fn pretrain_label(&self, x: &[f64]) -> usize {
        argmax(&self.head.matvec(&self.features(x)))
    }

    pub fn finetune_label(&self, x: &[f64]) -> usize {
        argmax(&self.fine_head.matvec(&self.features(x)))
    }

    fn sample_input(&self, rng: &mut StreamRng) -> Vec<f64> {
        let k = rng.index(self.centers.rows());
        (0..self.centers.cols())
            .map(|j| self.centers.get(k, j) + self.noise_std * rng.normal())
            .collect()
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Draw from the mixture until every class holds exactly `per_class`
/// samples, discarding overflow. Errors if a class region is too thin to
/// fill within a generous draw budget.
fn fill_exact(
    teacher: &Teacher,
    label_of: &dyn Fn(&Teacher, &[f64]) -> usize,
    classes: usize,
    per_class: usize,
    rng: &mut StreamRng,
) -> Result<(Matrix, Vec<usize>)> {
    let target = classes * per_class;
    let mut rows = Vec::with_capacity(target);
    let mut labels = Vec::with_capacity(target);
    let mut counts = vec![0usize; classes];
    let mut filled = 0;
    let cap = target.saturating_mul(1000).max(100_000);
    for _ in 0..cap {
        if filled == target {
            break;
        }
        let x = teacher.sample_input(rng);
        let y = label_of(teacher, &x);
        if counts[y] < per_class {
            counts[y] += 1;
            filled += 1;
            rows.push(x);
            labels.push(y);
        }
    }
    if filled < target {
        return Err(AtlsError::invalid(format!(
            "task generation drew {cap} samples without filling {per_class} per class \
             (counts {counts:?}); pick another teacher_seed or widen noise_std"
        )));
    }
    let inputs = Matrix::from_rows(rows)?;
    Ok((inputs, labels))
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shuffled minibatches covering every sample once; the last batch may
    /// be short. `jitter_std` adds fresh Gaussian noise to each input copy,
    /// zero means exact rows.
    pub fn batches(
        &self,
        batch_size: usize,
        rng: &mut StreamRng,
        jitter_std: f64,
    ) -> Vec<(Matrix, Vec<usize>)> {
        assert!(batch_size > 0, "batch_size must be >= 1");
        let mut order: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut order);
        let dim = self.inputs.cols();
        order
            .chunks(batch_size)
            .map(|chunk| {
                let mut xs = Matrix::zeros(chunk.len(), dim);
                let mut ys = Vec::with_capacity(chunk.len());
                for (row, &s) in chunk.iter().enumerate() {
                    for j in 0..dim {
                        let mut v = self.inputs.get(s, j);
                        if jitter_std > 0.0 {
                            v += jitter_std * rng.normal();
                        }
                        xs.set(row, j, v);
                    }
                    ys.push(self.labels[s]);
                }
                (xs, ys)
            })
            .collect()
    }
}

/// Write `label,x0,x1,...` rows with a header. Floats use the shortest
/// round-trip decimal form, so reloading loses nothing.
pub fn dataset_to_csv(ds: &Dataset, path: &Path) -> Result<()> {
    use std::io::Write;
    let mut out = String::new();
    out.push_str("label");
    for j in 0..ds.inputs.cols() {
        out.push_str(&format!(",x{j}"));
    }
    out.push('\n');
    for s in 0..ds.len() {
        out.push_str(&ds.labels[s].to_string());
        for j in 0..ds.inputs.cols() {
            out.push_str(&format!(",{}", ds.inputs.get(s, j)));
        }
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| AtlsError::io(path.display().to_string(), e))?;
    f.write_all(out.as_bytes()).map_err(|e| AtlsError::io(path.display().to_string(), e))?;
    Ok(())
}

/// Load a `label,features...` CSV. `keep` restricts to the given raw labels.
/// Kept labels are re-indexed densely in ascending order (so raw {3, 7}
/// becomes {0, 1}) and every feature column is min-max scaled to [0, 1].
pub fn dataset_from_csv(path: &Path, keep: Option<&[usize]>) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| AtlsError::io(path.display().to_string(), e))?;
    let mut raw_rows: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut width = None;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let first = fields.next().unwrap_or("");
        if line_no == 1 && first == "label" {
            continue;
        }
        let label: usize = first.parse().map_err(|_| {
            AtlsError::invalid(format!("{}: line {line_no}: bad label '{first}'", path.display()))
        })?;
        let mut feats = Vec::new();
        for f in fields {
            let v: f64 = f.trim().parse().map_err(|_| {
                AtlsError::invalid(format!(
                    "{}: line {line_no}: expected a number, got '{f}'",
                    path.display()
                ))
            })?;
            feats.push(v);
        }
        if feats.is_empty() {
            return Err(AtlsError::invalid(format!(
                "{}: line {line_no}: no feature columns",
                path.display()
            )));
        }
        match width {
            None => width = Some(feats.len()),
            Some(w) if w != feats.len() => {
                return Err(AtlsError::invalid(format!(
                    "{}: line {line_no}: {} features, expected {w}",
                    path.display(),
                    feats.len()
                )));
            }
            _ => {}
        }
        raw_rows.push((label, feats));
    }
    if raw_rows.is_empty() {
        return Err(AtlsError::invalid(format!(
            "{}: no data rows",
            path.display()
        )));
    }

    if let Some(keep) = keep {
        let present: std::collections::HashSet<usize> =
            raw_rows.iter().map(|(l, _)| *l).collect();
        for &k in keep {
            if !present.contains(&k) {
                return Err(AtlsError::invalid(format!(
                    "{}: kept label {k} not present in file",
                    path.display()
                )));
            }
        }
        raw_rows.retain(|(l, _)| keep.contains(l));
    }

    let mut kept_labels: Vec<usize> = raw_rows.iter().map(|(l, _)| *l).collect();
    kept_labels.sort_unstable();
    kept_labels.dedup();
    if kept_labels.len() < 2 {
        return Err(AtlsError::invalid(format!(
            "{}: need at least 2 classes, found {:?}",
            path.display(),
            kept_labels
        )));
    }
    let remap = |raw: usize| kept_labels.binary_search(&raw).expect("label seen above");

    let width = width.expect("nonempty rows have a width");
    let mut inputs = Matrix::zeros(raw_rows.len(), width);
    let mut labels = Vec::with_capacity(raw_rows.len());
    for (s, (l, feats)) in raw_rows.iter().enumerate() {
        labels.push(remap(*l));
        for (j, &v) in feats.iter().enumerate() {
            inputs.set(s, j, v);
        }
    }
    for j in 0..width {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in 0..inputs.rows() {
            lo = lo.min(inputs.get(s, j));
            hi = hi.max(inputs.get(s, j));
        }
        for s in 0..inputs.rows() {
            let v = inputs.get(s, j);
            let scaled = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
            inputs.set(s, j, scaled);
        }
    }
    Ok(Dataset {
        inputs,
        labels,
        class_count: kept_labels.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_mlp, evaluate};
    use crate::tile::TileConfig;
    use crate::trainer::{TrainConfig, Trainer, TrainerKind};

    fn histogram(labels: &[usize], classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &l in labels {
            h[l] += 1;
        }
        h
    }

    #[test]
    fn splits_have_exact_class_counts() {
        let fam = TaskFamily::default();
        let train = fam.pretrain_split(Split::Train).unwrap();
        assert_eq!(histogram(&train.labels, 6), vec![64; 6]);
        let test = fam.pretrain_split(Split::Test).unwrap();
        assert_eq!(histogram(&test.labels, 6), vec![32; 6]);
        let fine = fam.finetune_split(Split::Train).unwrap();
        assert_eq!(fine.class_count, 2);
        assert_eq!(histogram(&fine.labels, 2), vec![64; 2]);
    }

    #[test]
    fn generation_is_deterministic_and_splits_differ() {
        let fam = TaskFamily::default();
        let a = fam.pretrain_split(Split::Train).unwrap();
        let b = fam.pretrain_split(Split::Train).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.inputs.data(), b.inputs.data());
        let t = fam.pretrain_split(Split::Test).unwrap();
        assert_ne!(a.inputs.data(), t.inputs.data());
    }

    #[test]
    fn different_subsets_define_different_finetune_tasks() {
        let fam01 = TaskFamily::default();
        let fam02 = TaskFamily {
            finetune_subset: vec![0, 2],
            ..TaskFamily::default()
        };
        let a = fam01.finetune_split(Split::Train).unwrap();
        let b = fam02.finetune_split(Split::Train).unwrap();
        assert_ne!(
            a.inputs.data(),
            b.inputs.data(),
            "fresh heads should change the rejection path"
        );
    }

    #[test]
    fn linear_probe_on_teacher_features_solves_the_task() {
        // Labels are the argmax of a linear map of the teacher features, so
        // logistic regression on those exact features must score high.
        let fam = TaskFamily {
            samples_per_class_train: 128,
            ..TaskFamily::default()
        };
        let teacher = fam.teacher().unwrap();
        let to_features = |ds: &Dataset| {
            let rows: Vec<Vec<f64>> = (0..ds.len())
                .map(|s| teacher.features(ds.inputs.row(s)))
                .collect();
            Matrix::from_rows(rows).unwrap()
        };
        let train = fam.pretrain_split(Split::Train).unwrap();
        let test = fam.pretrain_split(Split::Test).unwrap();
        let ftrain = to_features(&train);
        let ftest = to_features(&test);

        let mut probe = build_mlp(&[fam.teacher_hidden, fam.pretrain_classes], 3).unwrap();
        let cfg = TrainConfig {
            lr: 0.5,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let mut t =
            Trainer::new(TrainerKind::DigitalSgd, cfg, &TileConfig::ideal(), &mut probe, 1)
                .unwrap();
        let feat_ds = Dataset {
            inputs: ftrain,
            labels: train.labels.clone(),
            class_count: train.class_count,
        };
        let mut rng = StreamRng::new(11);
        for _ in 0..200 {
            for (xs, ys) in feat_ds.batches(16, &mut rng, 0.0) {
                t.step(&mut probe, &xs, &ys).unwrap();
            }
        }
        let (err, _) = evaluate(&mut probe, &ftest, &test.labels).unwrap();
        assert!(err < 10.0, "probe test error {err}% should be under 10%");
    }

    #[test]
    fn batches_cover_every_sample_once() {
        let fam = TaskFamily::default();
        let ds = fam.finetune_split(Split::Test).unwrap();
        let mut rng = StreamRng::new(5);
        let batches = ds.batches(7, &mut rng, 0.0);
        let total: usize = batches.iter().map(|(_, ys)| ys.len()).sum();
        assert_eq!(total, ds.len());
        // Multiset of rows is preserved: compare sorted (label, row) pairs.
        let key = |xs: &Matrix, row: usize, y: usize| {
            let mut s = format!("{y}");
            for j in 0..xs.cols() {
                s.push_str(&format!(",{}", xs.get(row, j)));
            }
            s
        };
        let mut orig: Vec<String> = (0..ds.len())
            .map(|s| key(&ds.inputs, s, ds.labels[s]))
            .collect();
        let mut seen: Vec<String> = batches
            .iter()
            .flat_map(|(xs, ys)| (0..ys.len()).map(move |r| key(xs, r, ys[r])))
            .collect();
        orig.sort();
        seen.sort();
        assert_eq!(orig, seen);
    }

    #[test]
    fn jitter_perturbs_every_copy() {
        let fam = TaskFamily::default();
        let ds = fam.finetune_split(Split::Test).unwrap();
        let mut rng = StreamRng::new(5);
        let plain = ds.batches(ds.len(), &mut rng, 0.0);
        let mut rng = StreamRng::new(5);
        let noisy = ds.batches(ds.len(), &mut rng, 0.1);
        assert_ne!(plain[0].0.data(), noisy[0].0.data());
        assert_eq!(plain[0].1, noisy[0].1, "jitter must not touch labels");
    }

    #[test]
    fn csv_round_trip_and_filtering() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("task.csv");
        let fam = TaskFamily::default();
        let ds = fam.pretrain_split(Split::Test).unwrap();
        dataset_to_csv(&ds, &path).unwrap();

        let all = dataset_from_csv(&path, None).unwrap();
        assert_eq!(all.labels, ds.labels);
        assert_eq!(all.class_count, ds.class_count);
        // Every non-constant column lands exactly on [0, 1].
        for j in 0..all.inputs.cols() {
            let col: Vec<f64> = (0..all.inputs.rows()).map(|s| all.inputs.get(s, j)).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!((lo, hi), (0.0, 1.0), "column {j} not scaled");
        }

        let pair = dataset_from_csv(&path, Some(&[2, 4])).unwrap();
        assert_eq!(pair.class_count, 2);
        let h = histogram(&pair.labels, 2);
        assert_eq!(h, vec![32, 32], "raw classes 2 and 4 remap to 0 and 1");

        let missing = dataset_from_csv(&path, Some(&[2, 99]));
        assert!(missing.is_err(), "absent kept label should error");
    }

    #[test]
    fn csv_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let write = |name: &str, text: &str| {
            let p = dir.path().join(name);
            std::fs::write(&p, text).unwrap();
            p
        };
        let bad_float = write("f.csv", "label,x0\n0,1.0\n1,oops\n");
        let err = dataset_from_csv(&bad_float, None).unwrap_err().to_string();
        assert!(err.contains("line 3"), "got: {err}");

        let ragged = write("r.csv", "0,1.0,2.0\n1,3.0\n");
        let err = dataset_from_csv(&ragged, None).unwrap_err().to_string();
        assert!(err.contains("line 2"), "got: {err}");

        let bad_label = write("l.csv", "x,1.0\n");
        let err = dataset_from_csv(&bad_label, None).unwrap_err().to_string();
        assert!(err.contains("bad label"), "got: {err}");

        let empty = write("e.csv", "label,x0\n");
        assert!(dataset_from_csv(&empty, None).is_err());
    }

    #[test]
    fn family_validation_rejects_bad_shapes() {
        let ok = TaskFamily::default();
        assert!(ok.validate().is_ok());
        for (name, fam) in [
            ("dup subset", TaskFamily { finetune_subset: vec![1, 1], ..ok.clone() }),
            ("subset range", TaskFamily { finetune_subset: vec![0, 9], ..ok.clone() }),
            ("short subset", TaskFamily { finetune_subset: vec![0], ..ok.clone() }),
            ("one class", TaskFamily { pretrain_classes: 1, finetune_subset: vec![0, 0], ..ok.clone() }),
            ("zero dim", TaskFamily { input_dim: 0, ..ok.clone() }),
            ("zero hidden", TaskFamily { teacher_hidden: 0, ..ok.clone() }),
            ("zero samples", TaskFamily { samples_per_class_train: 0, ..ok.clone() }),
            ("zero noise", TaskFamily { noise_std: 0.0, ..ok.clone() }),
        ] {
            assert!(fam.validate().is_err(), "{name} should fail validation");
        }
    }
}
