//! Bitrate of a discrete representation and the sweep grid used for
//! bitrate-vs-accuracy curves.

use crate::error::{Error, Result};

/// `r · G · log2 V` bits per second.
pub fn eval_bitrate(groups: usize, vars: usize, rate: f64) -> Result<f64> {
    if groups == 0 || vars < 2 || !(rate > 0.0) {
        return Err(Error::InvalidArgument(format!("need G >= 1, V >= 2, r > 0; got G={groups} V={vars} r={rate}")));
    }
    Ok(rate * groups as f64 * (vars as f64).log2())
}

pub const SWEEP_GROUPS: [usize; 6] = [1, 2, 4, 8, 16, 32];
pub const SWEEP_VARS: [usize; 6] = [40, 80, 160, 320, 640, 1280];

/// Tab-separated `groups vars bits_per_second` rows for every sweep pair.
pub fn sweep_tsv(rate: f64) -> Result<String> {
    let mut out = String::from("groups\tvars\tbits_per_second\n");
    for g in SWEEP_GROUPS {
        for v in SWEEP_VARS {
            out.push_str(&format!("{g}\t{v}\t{:.2}\n", eval_bitrate(g, v, rate)?));
        }
    }
    Ok(out)
}
