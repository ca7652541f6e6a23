//! Numeric text formatting shared by the CSV and console emitters.

/// Formats `v` the way C's `printf("%.17g", v)` would: 17 significant
/// digits, fixed or scientific notation depending on magnitude, trailing
/// zeros trimmed. 17 digits round-trip every finite `f64`.
// The exponent test transcribes the %g rule (sci when exp < -4 or >= P).
#[allow(clippy::manual_range_contains)]
pub fn g17(v: f64) -> String {
    if v.is_nan() {
        return "nan".to_string();
    }
    if v.is_infinite() {
        return if v < 0.0 { "-inf" } else { "inf" }.to_string();
    }
    if v == 0.0 {
        return if v.is_sign_negative() { "-0" } else { "0" }.to_string();
    }
    let sci = format!("{:.16e}", v);
    let (_, exp) = sci.split_once('e').expect("scientific form");
    let exp: i32 = exp.parse().expect("exponent");
    if exp < -4 || exp >= 17 {
        let (mant, _) = sci.split_once('e').unwrap();
        format!("{}e{}{:02}", trim_zeros(mant), if exp < 0 { '-' } else { '+' }, exp.abs())
    } else {
        let decimals = (16 - exp).max(0) as usize;
        trim_zeros(&format!("{v:.decimals$}"))
    }
}

fn trim_zeros(s: &str) -> String {
    if !s.contains('.') {
        return s.to_string();
    }
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}
