use crate::error::{Error, Result};

/// Linear warmup from 0 to `peak` over `round(warmup_proportion · total)`
/// steps, then linear decay to 0 at `total`.
pub fn lr_at(step: u64, total: u64, peak: f64, warmup_proportion: f64) -> Result<f64> {
    if step > total {
        return Err(Error::Input(format!("step {step} beyond total {total}")));
    }
    if !(warmup_proportion > 0.0 && warmup_proportion < 1.0) {
        return Err(Error::Config(format!("warmup_proportion {warmup_proportion} outside (0, 1)")));
    }
    let warmup = (warmup_proportion * total as f64).round() as u64;
    let (s, w, t) = (step as f64, warmup as f64, total as f64);
    Ok(if step < warmup {
        peak * s / w
    } else if step == warmup {
        peak
    } else {
        peak * (t - s) / (t - w)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let lr = |s| lr_at(s, 1000, 3e-4, 0.1).unwrap();
        assert!((lr(50) - 1.5e-4).abs() < 1e-18);
        assert_eq!(lr(100), 3e-4);
        assert_eq!(lr(1000), 0.0);
        assert_eq!(lr(0), 0.0);
        assert!((lr(550) - 1.5e-4).abs() < 1e-18);
        assert!(lr_at(1001, 1000, 3e-4, 0.1).is_err());
    }
}
