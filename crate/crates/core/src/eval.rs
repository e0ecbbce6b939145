//! Accuracy reports and heatmap export.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::GrayImage;

use crate::data::{crop_at, images_to_tensor, write_pgm, Sample, MAX_CROP_OFFSET};
use crate::error::{Error, Result};
use crate::model::{extract_heatmap, IdenNetModel, INPUT_SIZE};
use crate::autograd::Mode;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `None` for classes without samples.
    pub per_class: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    pub fold_accuracies: Vec<f64>,
    pub mean_fold_accuracy: Option<f64>,
}

impl EvalReport {
    pub fn from_predictions(labels: &[usize], predictions: &[usize], num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidArgument("cannot evaluate an empty set".into()));
        }
        if labels.len() != predictions.len() {
            return Err(Error::InvalidArgument(format!("{} labels but {} predictions", labels.len(), predictions.len())));
        }
        let mut confusion = vec![vec![0u64; num_classes]; num_classes];
        for (&t, &p) in labels.iter().zip(predictions) {
            if t >= num_classes || p >= num_classes {
                return Err(Error::LabelOutOfRange { label: t.max(p), num_classes });
            }
            confusion[t][p] += 1;
        }
        Ok(Self::from_confusion(confusion, Vec::new()))
    }

    fn from_confusion(confusion: Vec<Vec<u64>>, fold_accuracies: Vec<f64>) -> Self {
        let total: u64 = confusion.iter().flatten().sum();
        let trace: u64 = (0..confusion.len()).map(|k| confusion[k][k]).sum();
        let per_class = confusion
            .iter()
            .enumerate()
            .map(|(k, row)| {
                let n: u64 = row.iter().sum();
                (n > 0).then(|| row[k] as f64 / n as f64)
            })
            .collect();
        let mean_fold_accuracy =
            (!fold_accuracies.is_empty()).then(|| fold_accuracies.iter().sum::<f64>() / fold_accuracies.len() as f64);
        Self { accuracy: trace as f64 / total as f64, per_class, confusion, fold_accuracies, mean_fold_accuracy }
    }

    /// Pools the confusion matrices of cross-validation folds and records
    /// each fold's accuracy.
    pub fn merge_folds(folds: &[EvalReport]) -> Result<Self> {
        let first = folds.first().ok_or_else(|| Error::InvalidArgument("no fold reports".into()))?;
        let k = first.confusion.len();
        let mut confusion = vec![vec![0u64; k]; k];
        for f in folds {
            if f.confusion.len() != k {
                return Err(Error::InvalidArgument("fold reports disagree on the class count".into()));
            }
            for (row, frow) in confusion.iter_mut().zip(&f.confusion) {
                for (c, v) in row.iter_mut().zip(frow) {
                    *c += v;
                }
            }
        }
        Ok(Self::from_confusion(confusion, folds.iter().map(|f| f.accuracy).collect()))
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "accuracy={:.6} samples={}", self.accuracy, self.total())?;
        if let Some(m) = self.mean_fold_accuracy {
            let folds: Vec<String> = self.fold_accuracies.iter().map(|a| format!("{a:.4}")).collect();
            writeln!(f, "mean_fold_accuracy={m:.6} folds={}", folds.join(","))?;
        }
        for (k, acc) in self.per_class.iter().enumerate() {
            match acc {
                Some(a) => writeln!(f, "class={k} accuracy={a:.6}")?,
                None => writeln!(f, "class={k} accuracy=n/a")?,
            }
        }
        writeln!(f, "confusion (rows: true, columns: predicted)")?;
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(|c| format!("{c:5}")).collect();
            writeln!(f, "{}", cells.join(" "))?;
        }
        Ok(())
    }
}

pub(crate) fn center_crops(samples: &[Sample]) -> Vec<GrayImage> {
    let o = MAX_CROP_OFFSET / 2;
    samples.iter().map(|s| crop_at(&s.image, o, o)).collect()
}

/// Files written by [`heatmap_export`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapExport {
    pub inputs: Vec<PathBuf>,
    pub heatmaps: Vec<PathBuf>,
    pub index: PathBuf,
}

/// Writes, for every sample, the 48×48 center crop the network sees and its
/// fusion-block heatmap as 8-bit PGMs (0 lowest response, 255 highest), plus
/// `index.tsv` listing labels and predicted expression.
pub fn heatmap_export(model: &mut IdenNetModel, samples: &[Sample], out_dir: &Path) -> Result<HeatmapExport> {
    fs::create_dir_all(out_dir)?;
    let crops = center_crops(samples);
    let mut inputs = Vec::new();
    let mut heatmaps = Vec::new();
    let index = out_dir.join("index.tsv");
    let mut rows = String::from("# sample\tinput\theatmap\texpression\tidentity\tpredicted\n");
    let mut rng = rand::SeedableRng::seed_from_u64(0);
    for (chunk_idx, chunk) in crops.chunks(32).enumerate() {
        let x = images_to_tensor(chunk.iter())?;
        let (maps, preds) = {
            let (s, out) = model.forward(&x, Mode::Eval, 0.0, &mut rng)?;
            (s.graph.value(out.fusion_maps).clone(), crate::train::argmax_rows(s.graph.value(out.emo_logits))?)
        };
        for (j, hm) in extract_heatmap(&maps)?.into_iter().enumerate() {
            let i = chunk_idx * 32 + j;
            let input = out_dir.join(format!("input_{i:05}.pgm"));
            let heat = out_dir.join(format!("heatmap_{i:05}.pgm"));
            write_pgm(&input, &chunk[j])?;
            let img = GrayImage::from_raw(INPUT_SIZE as u32, INPUT_SIZE as u32, hm.to_gray8()).expect("48x48 buffer");
            write_pgm(&heat, &img)?;
            let name = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            rows.push_str(&format!(
                "{i}\t{}\t{}\t{}\t{}\t{}\n",
                name(&input),
                name(&heat),
                samples[i].expression,
                samples[i].identity,
                preds[j]
            ));
            inputs.push(input);
            heatmaps.push(heat);
        }
    }
    let mut f = fs::File::create(&index)?;
    f.write_all(rows.as_bytes())?;
    Ok(HeatmapExport { inputs, heatmaps, index })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_perfect_sample() {
        let r = EvalReport::from_predictions(&[2], &[2], 4).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.confusion[2][2], 1);
        assert_eq!(r.total(), 1);
        assert_eq!(r.per_class[2], Some(1.0));
        assert_eq!(r.per_class[0], None);
    }

    #[test]
    fn trace_over_total_and_row_sums() {
        let labels = [0, 0, 1, 1, 1, 2];
        let preds = [0, 1, 1, 1, 0, 2];
        let r = EvalReport::from_predictions(&labels, &preds, 3).unwrap();
        assert!((r.accuracy - 4.0 / 6.0).abs() < 1e-15);
        let rows: Vec<u64> = r.confusion.iter().map(|row| row.iter().sum()).collect();
        assert_eq!(rows, vec![2, 3, 1]);
        let merged = EvalReport::merge_folds(&[r.clone(), EvalReport::from_predictions(&[0, 1], &[0, 1], 3).unwrap()]).unwrap();
        assert_eq!(merged.total(), 8);
        assert!((merged.accuracy - 6.0 / 8.0).abs() < 1e-15);
        assert_eq!(merged.fold_accuracies.len(), 2);
        assert!((merged.mean_fold_accuracy.unwrap() - (4.0 / 6.0 + 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn empty_set_is_an_error() {
        assert!(EvalReport::from_predictions(&[], &[], 3).is_err());
        assert!(EvalReport::from_predictions(&[3], &[0], 3).is_err());
    }
}
