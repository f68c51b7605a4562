use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let entries = gaaf_core::verify::run_gradcheck_suite(42);
    for e in &entries {
        println!("{:30} max_rel_err={:.3e} {} {}", e.name, e.max_rel_err, if e.passed { "PASS" } else { "FAIL" }, e.detail.clone().unwrap_or_default());
    }
    println!("total: {:.2}s", t0.elapsed().as_secs_f64());
}
