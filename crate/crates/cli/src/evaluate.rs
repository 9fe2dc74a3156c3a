use rayon::prelude::*;
use udmamba_core::metrics::{class_metrics, MetricsReport};
use udmamba_core::network::Network;
use udmamba_core::synth::Dataset;

use crate::error::CliResult;

/// Metrics of `net` on the given samples; batches may run in parallel but
/// the reduction follows sample order.
pub fn evaluate(net: &Network, dataset: &Dataset, indices: &[usize], batch: usize) -> CliResult<MetricsReport> {
    let classes = net.config().num_classes;
    let per_batch: Vec<Vec<Vec<_>>> = indices
        .par_chunks(batch.max(1))
        .map(|chunk| -> CliResult<Vec<Vec<_>>> {
            let (images, target) = dataset.batch(chunk)?;
            let (h, w) = (images.shape()[2], images.shape()[3]);
            let pred = net.predict(&images)?;
            pred.chunks(h * w)
                .zip(target.chunks(h * w))
                .map(|(p, t)| Ok(class_metrics(p, t, h, w, classes)?))
                .collect()
        })
        .collect::<CliResult<_>>()?;
    let per_sample: Vec<_> = per_batch.into_iter().flatten().collect();
    Ok(MetricsReport::from_samples(&per_sample))
}
