use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Gau,
    Mhsa,
    Ffn,
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockKind::Gau => "gau",
            BlockKind::Mhsa => "mhsa",
            BlockKind::Ffn => "ffn",
        })
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gau" => Ok(BlockKind::Gau),
            "mhsa" => Ok(BlockKind::Mhsa),
            "ffn" => Ok(BlockKind::Ffn),
            other => Err(Error::Config(format!("unknown block kind `{other}`"))),
        }
    }
}

/// `headline` counts only the big projection matrices; `exact` counts every
/// weight tensor of the block as built here.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub headline: u64,
    pub exact: u64,
}

/// Parameter counts for one block.
///
/// - GAU: headline `3·d_h·d_ff`; exact adds `W_z` (`d_h·s`) and the four
///   length-`s` affine vectors.
/// - MHSA: `4·d_h²` (query, key, value and output projections).
/// - FFN: `2·d_h·d_ff`.
///
/// Layer-norm gains and biases are not counted.
pub fn count_params(kind: BlockKind, d_h: usize, d_ff: usize, s: usize, heads: usize) -> Result<ParamCount> {
    let positive = |name: &str, v: usize| {
        if v == 0 {
            Err(Error::Config(format!("{name} must be positive")))
        } else {
            Ok(v as u64)
        }
    };
    let d = positive("d_h", d_h)?;
    let c = match kind {
        BlockKind::Gau => {
            let f = positive("d_ff", d_ff)?;
            let s = positive("s", s)?;
            let headline = 3 * d * f;
            ParamCount {
                headline,
                exact: headline + d * s + 4 * s,
            }
        }
        BlockKind::Mhsa => {
            let h = positive("heads", heads)?;
            if d % h != 0 {
                return Err(Error::Config(format!("head count {heads} must divide d_h = {d_h}")));
            }
            ParamCount {
                headline: 4 * d * d,
                exact: 4 * d * d,
            }
        }
        BlockKind::Ffn => {
            let f = positive("d_ff", d_ff)?;
            ParamCount {
                headline: 2 * d * f,
                exact: 2 * d * f,
            }
        }
    };
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn headline_examples() {
        let g = count_params(BlockKind::Gau, 768, 1536, 128, 1).unwrap();
        assert_eq!(g.headline, 3_538_944);
        assert_eq!(g.exact - g.headline, 98_304 + 512);
        assert_eq!(count_params(BlockKind::Gau, 4, 8, 2, 1).unwrap().headline, 96);
    }

    #[test]
    fn two_gau_match_encoder_block() {
        for d in [4usize, 64, 768] {
            let g = count_params(BlockKind::Gau, d, 2 * d, 1, 1).unwrap().headline;
            let m = count_params(BlockKind::Mhsa, d, 0, 0, 1).unwrap().headline;
            let f = count_params(BlockKind::Ffn, d, 4 * d, 0, 1).unwrap().headline;
            assert_eq!(2 * g, m + f);
            assert_eq!(m + f, 12 * (d as u64).pow(2));
        }
    }

    #[test]
    fn rejects_bad_dims() {
        assert!(count_params(BlockKind::Mhsa, 8, 0, 0, 3).is_err());
        assert!(count_params(BlockKind::Gau, 0, 8, 2, 1).is_err());
        assert_eq!("ffn".parse::<BlockKind>().unwrap(), BlockKind::Ffn);
    }
}
