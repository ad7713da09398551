use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The seven supported architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "LSTM")]
    Lstm,
    #[serde(rename = "StackedLSTM")]
    StackedLstm,
    #[serde(rename = "GRU")]
    Gru,
    #[serde(rename = "RNN")]
    Rnn,
    #[serde(rename = "CNN")]
    Cnn,
    #[serde(rename = "CNN-LSTM")]
    CnnLstm,
    #[serde(rename = "ConvLSTM")]
    ConvLstm,
}

impl Architecture {
    /// Table column order.
    pub const ALL: [Architecture; 7] = [
        Architecture::Lstm,
        Architecture::StackedLstm,
        Architecture::Gru,
        Architecture::Rnn,
        Architecture::Cnn,
        Architecture::CnnLstm,
        Architecture::ConvLstm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Lstm => "LSTM",
            Architecture::StackedLstm => "StackedLSTM",
            Architecture::Gru => "GRU",
            Architecture::Rnn => "RNN",
            Architecture::Cnn => "CNN",
            Architecture::CnnLstm => "CNN-LSTM",
            Architecture::ConvLstm => "ConvLSTM",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).map(|c| c.to_ascii_lowercase()).collect();
        Ok(match key.as_str() {
            "lstm" => Architecture::Lstm,
            "stackedlstm" => Architecture::StackedLstm,
            "gru" => Architecture::Gru,
            "rnn" => Architecture::Rnn,
            "cnn" => Architecture::Cnn,
            "cnnlstm" => Architecture::CnnLstm,
            "convlstm" => Architecture::ConvLstm,
            _ => return Err(Error::InvalidSpec(format!("unknown architecture {s:?}"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

/// Architecture description. Everything needed to rebuild a model's
/// parameter layout and forward pass.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    /// Time steps per input window.
    pub window: usize,
    /// Features per time step.
    pub channels: usize,
    /// Recurrent units (filters for ConvLSTM).
    pub hidden: usize,
    pub layers: usize,
    pub task: Task,
    pub seed: u64,
    /// Convolution filters for CNN and CNN-LSTM.
    pub filters: usize,
    pub kernel: usize,
    /// CNN-LSTM / ConvLSTM split the window into `subsequences` blocks of
    /// `subsequence_len` steps.
    pub subsequences: usize,
    pub subsequence_len: usize,
}

pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_FILTERS: usize = 32;
pub const DEFAULT_KERNEL: usize = 3;
pub const DEFAULT_SUBSEQUENCES: usize = 4;
pub const DEFAULT_SUBSEQUENCE_LEN: usize = 6;

impl ModelSpec {
    pub fn new(architecture: Architecture, window: usize, channels: usize, task: Task, seed: u64) -> Self {
        Self {
            architecture,
            window,
            channels,
            hidden: DEFAULT_HIDDEN,
            layers: if architecture == Architecture::StackedLstm { 2 } else { 1 },
            task,
            seed,
            filters: DEFAULT_FILTERS,
            kernel: DEFAULT_KERNEL,
            subsequences: DEFAULT_SUBSEQUENCES,
            subsequence_len: DEFAULT_SUBSEQUENCE_LEN,
        }
    }

    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn with_filters(mut self, filters: usize) -> Self {
        self.filters = filters;
        self
    }

    pub fn with_layers(mut self, layers: usize) -> Self {
        self.layers = layers;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Steps covered by the subsequence split.
    pub fn aligned_len(&self) -> usize {
        self.subsequences * self.subsequence_len
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(format!("{}: {msg}", self.architecture)));
        if self.window < 2 {
            return bad(format!("window must be at least 2 steps, got {}", self.window));
        }
        if self.channels == 0 || self.hidden == 0 {
            return bad("channels and hidden size must be positive".into());
        }
        match self.architecture {
            Architecture::StackedLstm if self.layers < 2 => {
                return bad(format!("needs at least 2 layers, got {}", self.layers))
            }
            Architecture::StackedLstm => {}
            _ if self.layers != 1 => return bad(format!("expects exactly 1 layer, got {}", self.layers)),
            _ => {}
        }
        match self.architecture {
            Architecture::Cnn => {
                if self.filters == 0 || self.kernel == 0 || self.window < self.kernel + 1 {
                    return bad(format!(
                        "kernel {} with {} filters does not fit a {}-step window",
                        self.kernel, self.filters, self.window
                    ));
                }
            }
            Architecture::CnnLstm => {
                if self.filters == 0
                    || self.kernel == 0
                    || self.subsequences == 0
                    || self.subsequence_len < self.kernel + 1
                {
                    return bad(format!(
                        "kernel {} does not fit {} subsequences of {} steps",
                        self.kernel, self.subsequences, self.subsequence_len
                    ));
                }
            }
            Architecture::ConvLstm => {
                if self.kernel.is_multiple_of(2) || self.subsequences == 0 || self.subsequence_len < self.kernel {
                    return bad(format!(
                        "needs an odd kernel no wider than the subsequence, got kernel {} over {} steps",
                        self.kernel, self.subsequence_len
                    ));
                }
            }
            _ => {}
        }
        Ok(())
    }
}
