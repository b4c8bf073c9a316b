use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::lm::{Sublayer, Transformer};

use super::AnalysisError;

fn centered(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut c = x.clone();
    let n = x.nrows() as f64;
    for mut col in c.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
    }
    c
}

/// Linear CKA: `‖Yᶜᵀ Xᶜ‖²_F / (‖Xᶜᵀ Xᶜ‖_F ‖Yᶜᵀ Yᶜ‖_F)` on column-centered
/// activations. Rows are the shared evaluation positions.
pub fn linear_cka(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64, AnalysisError> {
    if x.nrows() != y.nrows() {
        return Err(AnalysisError::InvalidArgument(format!(
            "CKA needs equal row counts, got {} and {}",
            x.nrows(),
            y.nrows()
        )));
    }
    if x.nrows() < 2 {
        return Err(AnalysisError::Undefined("CKA needs at least two rows".into()));
    }
    let (xc, yc) = (centered(x), centered(y));
    let cross = (yc.transpose() * &xc).norm_squared();
    let sx = (xc.transpose() * &xc).norm();
    let sy = (yc.transpose() * &yc).norm();
    if sx == 0.0 || sy == 0.0 {
        return Err(AnalysisError::Undefined("constant activations have no centered variance".into()));
    }
    Ok((cross / (sx * sy)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SublayerCka {
    pub layer: usize,
    pub sublayer: Sublayer,
    pub cka: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaResult {
    pub per_sublayer: Vec<SublayerCka>,
    pub attention_mean: f64,
    pub mlp_mean: f64,
}

impl CkaResult {
    fn from_parts(per_sublayer: Vec<SublayerCka>) -> CkaResult {
        let mean = |s: Sublayer| {
            let v: Vec<f64> = per_sublayer.iter().filter(|c| c.sublayer == s).map(|c| c.cka).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        CkaResult {
            attention_mean: mean(Sublayer::Attention),
            mlp_mean: mean(Sublayer::Mlp),
            per_sublayer,
        }
    }
}

/// Activations of every sublayer over a token stream, sentences stacked.
pub fn stacked_activations(model: &Transformer, sentences: &[Vec<usize>]) -> Result<Vec<(usize, Sublayer, DMatrix<f64>)>, AnalysisError> {
    let mut rows: Vec<(usize, Sublayer, Vec<f64>)> = Vec::new();
    let d = model.config().model_dim;
    for s in sentences {
        for (k, rec) in model.capture_activations(s)?.into_iter().enumerate() {
            if rows.len() <= k {
                rows.push((rec.layer, rec.sublayer, Vec::new()));
            }
            for r in rec.data.row_iter() {
                rows[k].2.extend(r.iter());
            }
        }
    }
    Ok(rows
        .into_iter()
        .map(|(l, s, v)| (l, s, DMatrix::from_row_slice(v.len() / d, d, &v)))
        .collect())
}

/// Per-sublayer CKA between two models of the same shape on one stream.
pub fn model_cka(a: &Transformer, b: &Transformer, sentences: &[Vec<usize>]) -> Result<CkaResult, AnalysisError> {
    let xa = stacked_activations(a, sentences)?;
    let xb = stacked_activations(b, sentences)?;
    cka_of(&xa, &xb)
}

pub(crate) fn cka_of(
    xa: &[(usize, Sublayer, DMatrix<f64>)],
    xb: &[(usize, Sublayer, DMatrix<f64>)],
) -> Result<CkaResult, AnalysisError> {
    if xa.len() != xb.len() {
        return Err(AnalysisError::InvalidArgument("models have different layer counts".into()));
    }
    let per = xa
        .iter()
        .zip(xb)
        .map(|((l, s, x), (_, _, y))| {
            Ok(SublayerCka {
                layer: *l,
                sublayer: *s,
                cka: linear_cka(x, y)?,
            })
        })
        .collect::<Result<Vec<_>, AnalysisError>>()?;
    Ok(CkaResult::from_parts(per))
}

/// Mean CKA over all seed pairs of a population, with the pair matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationCka {
    pub attention_mean: f64,
    pub mlp_mean: f64,
    /// `[i][j]` attention-mean CKA between seeds `i` and `j`.
    pub attention_pairs: Vec<Vec<f64>>,
    pub mlp_pairs: Vec<Vec<f64>>,
}

pub fn population_cka(models: &[&Transformer], sentences: &[Vec<usize>]) -> Result<PopulationCka, AnalysisError> {
    let n = models.len();
    if n < 2 {
        return Err(AnalysisError::InvalidArgument("a population needs at least two models".into()));
    }
    let acts = models
        .iter()
        .map(|m| stacked_activations(m, sentences))
        .collect::<Result<Vec<_>, _>>()?;
    let mut attention_pairs = vec![vec![1.0; n]; n];
    let mut mlp_pairs = vec![vec![1.0; n]; n];
    let (mut sa, mut sm, mut count) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let r = cka_of(&acts[i], &acts[j])?;
            attention_pairs[i][j] = r.attention_mean;
            attention_pairs[j][i] = r.attention_mean;
            mlp_pairs[i][j] = r.mlp_mean;
            mlp_pairs[j][i] = r.mlp_mean;
            sa += r.attention_mean;
            sm += r.mlp_mean;
            count += 1.0;
        }
    }
    Ok(PopulationCka {
        attention_mean: sa / count,
        mlp_mean: sm / count,
        attention_pairs,
        mlp_pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// Straightforward evaluation: HSIC with the centering matrix H.
    fn reference(x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
        let n = x.nrows();
        let h = DMatrix::<f64>::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
        let (k, l) = (x * x.transpose(), y * y.transpose());
        let hsic = |a: &DMatrix<f64>, b: &DMatrix<f64>| (&h * a * &h * b).trace();
        hsic(&k, &l) / (hsic(&k, &k) * hsic(&l, &l)).sqrt()
    }

    #[test]
    fn matches_reference() {
        let x = random(10, 4, 1);
        let y = random(10, 4, 2);
        let c = linear_cka(&x, &y).unwrap();
        assert!((c - reference(&x, &y)).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&c));
    }

    #[test]
    fn invariances() {
        let x = random(30, 6, 3);
        let y = random(30, 5, 4);
        assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-9);
        let q = random(6, 6, 5).qr().q();
        let base = linear_cka(&x, &y).unwrap();
        assert!((linear_cka(&(&x * &q), &y).unwrap() - base).abs() < 1e-9);
        assert!((linear_cka(&x, &(&y * -3.5)).unwrap() - base).abs() < 1e-9);
        assert!((linear_cka(&(&x * &q * 0.01), &x).unwrap() - 1.0).abs() < 1e-9);
        // Translating columns does not matter either.
        assert!((linear_cka(&x.add_scalar(7.0), &y).unwrap() - base).abs() < 1e-9);
    }

    #[test]
    fn degenerate_inputs() {
        let x = DMatrix::from_element(5, 3, 2.0);
        assert!(matches!(linear_cka(&x, &random(5, 3, 0)), Err(AnalysisError::Undefined(_))));
        assert!(matches!(
            linear_cka(&random(4, 3, 0), &random(5, 3, 0)),
            Err(AnalysisError::InvalidArgument(_))
        ));
    }
}
