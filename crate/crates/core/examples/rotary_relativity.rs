//! The behavior-scaled rotary logit depends on positions only through their
//! offset.
//!
//! `cargo run --release --example rotary_relativity`

use mbdiff::mbae::{barope_transform, dot, rope_transform};
use mbdiff::rng::stream;
use rand_distr::{Distribution, StandardNormal};

fn main() {
    let mut rng = stream(1, "example", 0);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let (q, k) = (draw(8), draw(8));
    let sq: Vec<f64> = draw(4).iter().map(|x: &f64| x.exp()).collect();
    let sk: Vec<f64> = draw(4).iter().map(|x: &f64| x.exp()).collect();
    let logit = |m: usize, n: usize| dot(&barope_transform(&q, &sq, m, 10000.0), &barope_transform(&k, &sk, n, 10000.0));

    println!("{:>6} {:>6} {:>14} {:>14}", "m", "n", "scaled", "plain");
    for shift in [0, 3, 17, 250] {
        let (m, n) = (5 + shift, 2 + shift);
        let plain = dot(&rope_transform(&q, m, 10000.0), &rope_transform(&k, n, 10000.0));
        println!("{m:>6} {n:>6} {:>14.10} {plain:>14.10}", logit(m, n));
    }
    let ones = vec![1.0; 4];
    assert_eq!(barope_transform(&q, &ones, 9, 10000.0), rope_transform(&q, 9, 10000.0));
    println!("unit scales reproduce the plain rotary map exactly");
}
