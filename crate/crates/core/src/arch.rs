// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::XcError;

/// Transformer architecture family of a probed model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Bidirectional masked LM (xlm-r style); object slot is one `<mask>` per sub-token.
    Encoder,
    /// Causal LM (Llama style); object is the continuation of an instruction prompt.
    Decoder,
    /// Span-corruption seq2seq (mT0 style); object slot is a sentinel.
    EncoderDecoder,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::Encoder, Arch::Decoder, Arch::EncoderDecoder];
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Encoder => "encoder",
            Arch::Decoder => "decoder",
            Arch::EncoderDecoder => "encoder_decoder",
        })
    }
}

impl FromStr for Arch {
    type Err = XcError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "encoder" => Ok(Arch::Encoder),
            "decoder" => Ok(Arch::Decoder),
            "encoder_decoder" | "encoder-decoder" => Ok(Arch::EncoderDecoder),
            other => Err(XcError::Argument(format!("unknown architecture family `{other}`"))),
        }
    }
}
