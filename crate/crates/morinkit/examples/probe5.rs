use morinkit::realroots::{real_roots, sturm_count, Polynomial};
fn main() {
    // t^5 - 1e-15
    let p = Polynomial::new(vec![-1e-15, 0.0, 0.0, 0.0, 0.0, 1.0]);
    for (a, b) in [
        (-2.0f64, 2.0f64),
        (0.0, 2e-3),
        (0.5e-3, 1.5e-3),
        (-1e-6, 1e-6),
        (0.9e-3, 1.1e-3),
        (-2.0, 0.9e-3),
    ] {
        match sturm_count(&p, a, b) {
            Ok(c) => println!("count({a:+.3e}, {b:+.3e}) = {c}"),
            Err(e) => println!("count({a:+.3e}, {b:+.3e}): {e}"),
        }
    }
    let rs = real_roots(&p, 1e-12).unwrap();
    println!(
        "roots {:?} flags {:?} certified {}",
        rs.roots, rs.simple_flags, rs.certified_distinct
    );
}
