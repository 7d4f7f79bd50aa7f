use crate::error::{ImcError, Result};
use crate::training::IoSequence;

/// Overlapping windows of length `window` at offsets `0, stride, 2·stride, …`;
/// there are `⌊(L − window)/stride⌋ + 1` of them.
pub fn tbptt_slices(seq: &IoSequence, window: usize, stride: usize) -> Result<Vec<IoSequence>> {
    if seq.inputs.len() != seq.outputs.len() {
        return Err(ImcError::LengthMismatch(format!(
            "{} inputs vs {} outputs",
            seq.inputs.len(),
            seq.outputs.len()
        )));
    }
    if window == 0 || stride == 0 {
        return Err(ImcError::InvalidArgument("window and stride must be positive".into()));
    }
    let len = seq.len();
    if window > len {
        return Err(ImcError::InvalidArgument(format!(
            "window {window} exceeds trajectory length {len}"
        )));
    }
    let count = (len - window) / stride + 1;
    Ok((0..count)
        .map(|i| {
            let a = i * stride;
            IoSequence {
                inputs: seq.inputs[a..a + window].to_vec(),
                outputs: seq.outputs[a..a + window].to_vec(),
            }
        })
        .collect())
}

/// Length of the experiment that yields exactly `count` windows.
pub fn experiment_length(count: usize, window: usize, stride: usize) -> usize {
    window + count.saturating_sub(1) * stride
}
