use crate::error::{Error, Result};
use crate::nn::{GradientVector, ModelSpec, ParamKind};

/// Labels of a batch with pairwise distinct classes, read off the output-layer
/// bias gradient.
///
/// For cross-entropy over a softmax, `d loss / d b_c` is the batch mean of
/// `softmax_c - [c = y]`, so the classes present in the batch carry the most
/// negative entries. Labels are returned most negative first; the order is not
/// tied to the sample order.
pub fn reconstruct_labels(grad: &GradientVector, spec: &ModelSpec, batch: usize) -> Result<Vec<usize>> {
    let bias = grad
        .block(spec.output_layer(), ParamKind::Bias)
        .ok_or_else(|| Error::Precondition("output layer has no bias".into()))?;
    if batch == 0 || batch > bias.len() {
        return Err(Error::Precondition(format!(
            "cannot assign {batch} distinct labels from {} classes",
            bias.len()
        )));
    }
    let mut order: Vec<usize> = (0..bias.len()).collect();
    order.sort_by(|&a, &b| bias[a].total_cmp(&bias[b]).then(a.cmp(&b)));
    if bias[order[0]].is_nan() || bias[order[0]] >= 0.0 {
        return Err(Error::LabelRecovery(
            "output bias gradient has no negative entry".into(),
        ));
    }
    order.truncate(batch);
    Ok(order)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::nn::{Layer, Layout};

    fn three_class() -> ModelSpec {
        ModelSpec::new(
            [1, 1, 1],
            3,
            vec![Layer::Dense {
                inputs: 1,
                outputs: 3,
                bias: true,
            }],
        )
        .unwrap()
    }

    fn grad(spec: &ModelSpec, bias: [f64; 3]) -> GradientVector {
        let mut v = vec![0.1, 0.1, 0.1];
        v.extend(bias);
        GradientVector::new(v, Arc::new(Layout::for_spec(spec))).unwrap()
    }

    #[test]
    fn unique_negative_entry() {
        let spec = three_class();
        assert_eq!(reconstruct_labels(&grad(&spec, [0.3, -0.7, 0.4]), &spec, 1).unwrap(), vec![1]);
    }

    #[test]
    fn all_positive_is_an_error() {
        let spec = three_class();
        assert!(matches!(
            reconstruct_labels(&grad(&spec, [0.3, 0.7, 0.4]), &spec, 1),
            Err(Error::LabelRecovery(_))
        ));
    }

    #[test]
    fn greedy_batch_assignment() {
        let spec = three_class();
        let g = grad(&spec, [-0.2, 0.5, -0.3]);
        assert_eq!(reconstruct_labels(&g, &spec, 2).unwrap(), vec![2, 0]);
        assert!(reconstruct_labels(&g, &spec, 4).is_err());
    }
}
