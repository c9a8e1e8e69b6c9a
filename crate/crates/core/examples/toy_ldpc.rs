//! Walks the n=8 toy code: its codebook, and belief propagation fixing single flips.
//!
//! Usage: `cargo run --release --example toy_ldpc`

use semcom::baseline::LdpcCode;

fn bits(v: &[u8]) -> String {
    v.iter().map(|b| char::from(b'0' + b)).collect()
}

fn main() -> semcom::Result<()> {
    let code = LdpcCode::toy();
    println!("n={} k={} m={}", code.n(), code.k(), code.m());
    for row in code.parity_check_matrix() {
        println!("  H {}", bits(&row));
    }

    let mut corrected = 0;
    let mut trials = 0;
    for msg in 0..1u32 << code.k() {
        let message: Vec<u8> = (0..code.k()).map(|i| ((msg >> i) & 1) as u8).collect();
        let word = code.encode(&message)?;
        assert!(code.syndrome_ok(&word));
        println!("  {} -> {}", bits(&message), bits(&word));
        for flip in 0..code.n() {
            // Confident LLRs with one position pointing the wrong way.
            let llr: Vec<f64> = word
                .iter()
                .enumerate()
                .map(|(i, &b)| {
                    let v = if b == 0 { 4.0 } else { -4.0 };
                    if i == flip {
                        -v
                    } else {
                        v
                    }
                })
                .collect();
            let out = code.decode(&llr, 50)?;
            trials += 1;
            if out.success && out.codeword == word {
                corrected += 1;
            }
        }
    }
    println!("single flips corrected: {corrected}/{trials}");
    Ok(())
}
