//! Dense correspondence retrieval between two views of the same image.

use crate::augment::{sample_view, AugmentProfile, CanonicalPoint};
use crate::encoder::{stack_records, Encoder, Mode, Provenance};
use crate::error::Result;
use crate::evalkit::corpus::SyntheticImage;
use crate::matching::build_grid;
use crate::rng::{stream, TAG_EVAL};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub profile: AugmentProfile,
    pub seed: u64,
    /// Thresholds for the fraction of retrievals landing within a canonical
    /// distance of the query.
    pub thresholds: Vec<f64>,
    pub chunk: usize,
}

impl EvalSettings {
    pub fn new(profile: AugmentProfile, seed: u64, t_pos: f64) -> Self {
        Self {
            profile,
            seed,
            thresholds: vec![t_pos / 2.0, t_pos, 2.0 * t_pos],
            chunk: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceReport {
    pub top1: f64,
    /// Mean canonical distance between the retrieved cell and the query.
    pub mean_error: f64,
    /// Accuracy of uniform random retrieval, `1/L`.
    pub baseline: f64,
    pub within: Vec<(f64, f64)>,
    pub n_images: usize,
    pub n_queries: usize,
    /// Images whose view-2 features were all identical.
    pub degenerate_images: usize,
}

fn argmax_cosine(q: &[f64], keys: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (j, k) in keys.iter().enumerate() {
        let v: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
        if v > best_v {
            best_v = v;
            best = j;
        }
    }
    best
}

fn unit_rows(values: &[f32], d: usize) -> Vec<Vec<f64>> {
    values
        .chunks_exact(d)
        .map(|r| {
            let n = r.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|&x| x as f64 / n).collect()
        })
        .collect()
}

fn nearest(points: &[CanonicalPoint], p: &CanonicalPoint) -> usize {
    let mut best = 0;
    for (j, q) in points.iter().enumerate() {
        if q.distance(p) < points[best].distance(p) {
            best = j;
        }
    }
    best
}

/// For each image (processed in id order, one RNG stream per id), two views
/// are drawn. Each view-1 cell whose canonical point falls inside view 2
/// queries view 2 by cosine similarity; its ground-truth partner is the
/// nearest view-2 cell.
pub fn correspondence_eval(encoder: &Encoder, images: &[SyntheticImage], settings: &EvalSettings) -> Result<CorrespondenceReport> {
    let mut enc = encoder.clone();
    enc.set_mode(Mode::Eval);
    let d = enc.config.out_dim;
    let mut order: Vec<&SyntheticImage> = images.iter().collect();
    order.sort_by_key(|im| im.id);

    let (mut hits, mut queries, mut err_sum, mut degenerate) = (0usize, 0usize, 0.0f64, 0usize);
    let mut within = vec![0usize; settings.thresholds.len()];
    let mut l_view = 1;
    for chunk in order.chunks(settings.chunk.max(1)) {
        let mut v1 = Vec::with_capacity(chunk.len());
        let mut v2 = Vec::with_capacity(chunk.len());
        for im in chunk {
            let mut rng = stream(settings.seed, &[TAG_EVAL, im.id]);
            v1.push(sample_view(&im.image, &mut rng, &settings.profile)?);
            v2.push(sample_view(&im.image, &mut rng, &settings.profile)?);
        }
        let (f1, fh, fw) = enc.infer(&stack_records(&v1)?, Provenance::Teacher)?;
        let (f2, _, _) = enc.infer(&stack_records(&v2)?, Provenance::Teacher)?;
        let l = fh * fw;
        l_view = l;
        for b in 0..chunk.len() {
            let g1 = build_grid(&v1[b].geometry, fh, fw)?;
            let g2 = build_grid(&v2[b].geometry, fh, fw)?;
            let a = unit_rows(&f1[b * l * d..(b + 1) * l * d], d);
            let keys = unit_rows(&f2[b * l * d..(b + 1) * l * d], d);
            let raw2 = &f2[b * l * d..(b + 1) * l * d];
            if raw2.chunks_exact(d).all(|r| r == &raw2[..d]) {
                degenerate += 1;
            }
            let geom2 = &v2[b].geometry;
            for (i, p) in g1.points.iter().enumerate() {
                let (vx, vy) = geom2.canonical_to_view(*p);
                if !(0.0..=geom2.out_w as f64).contains(&vx) || !(0.0..=geom2.out_h as f64).contains(&vy) {
                    continue;
                }
                let truth = nearest(&g2.points, p);
                let got = argmax_cosine(&a[i], &keys);
                queries += 1;
                if got == truth {
                    hits += 1;
                }
                let e = g2.points[got].distance(p);
                err_sum += e;
                for (w, &t) in within.iter_mut().zip(&settings.thresholds) {
                    if e < t {
                        *w += 1;
                    }
                }
            }
        }
    }
    let q = queries.max(1) as f64;
    Ok(CorrespondenceReport {
        top1: hits as f64 / q,
        mean_error: err_sum / q,
        baseline: 1.0 / l_view as f64,
        within: settings
            .thresholds
            .iter()
            .zip(&within)
            .map(|(&t, &w)| (t, w as f64 / q))
            .collect(),
        n_images: images.len(),
        n_queries: queries,
        degenerate_images: degenerate,
    })
}
