use super::{Handler, Interrupt, Program};
use crate::error::ConfigError;

/// A program restricted to a subset of its observations, with the
/// likelihood scaled by `N / B`.
#[derive(Debug, Clone)]
pub struct MinibatchView<'p, P> {
    program: &'p P,
    batch: Vec<usize>,
    scale: f64,
}

impl<P> MinibatchView<'_, P> {
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn batch(&self) -> &[usize] {
        &self.batch
    }
}

pub fn set_minibatch<P: Program>(
    program: &P,
    batch: Vec<usize>,
) -> Result<MinibatchView<'_, P>, ConfigError> {
    let n = program
        .data_size()
        .ok_or_else(|| ConfigError::new("program does not support minibatching"))?;
    if batch.is_empty() {
        return Err(ConfigError::new("empty minibatch"));
    }
    if let Some(&bad) = batch.iter().find(|&&i| i >= n) {
        return Err(ConfigError::new(format!(
            "minibatch index {bad} out of range for {n} observations"
        )));
    }
    let scale = n as f64 / batch.len() as f64;
    Ok(MinibatchView {
        program,
        batch,
        scale,
    })
}

impl<P: Program> Program for MinibatchView<'_, P> {
    fn run<H: Handler>(&self, h: &mut H) -> Result<(), Interrupt> {
        h.scale_likelihood(self.scale);
        self.program.run_on(h, &self.batch)
    }

    fn data_size(&self) -> Option<usize> {
        self.program.data_size()
    }

    fn differentiable(&self) -> bool {
        self.program.differentiable()
    }
}
