//! Rotary scores depend only on the offsets between coordinates, and each
//! half of the head only on its own axis.
use hisam::hmat::{hrope_score, HRopeTables};
use hisam::seqstream::Coord;

fn main() -> hisam::Result<()> {
    let t = HRopeTables::new(8, 1e4, 100.0)?;
    let q = [0.3, -1.0, 0.5, 0.2, 0.9, -0.4, 0.1, 0.7];
    let k = [1.0, 0.2, -0.3, 0.8, -0.5, 0.6, 0.4, -0.2];
    for shift in [0, 5, 40] {
        let s = hrope_score(&q, &k, Coord::new(3 + shift, 2), Coord::new(1 + shift, 5), &t)?;
        println!("m shifted by {shift:>2}: {s:.12}");
    }
    let inter_only = [0.3, -1.0, 0.5, 0.2, 0.0, 0.0, 0.0, 0.0];
    for n in [0, 4, 16] {
        let s = hrope_score(&inter_only, &k, Coord::new(2, n), Coord::new(1, 0), &t)?;
        println!("intra half zeroed, n = {n:>2}: {s:.12}");
    }
    Ok(())
}
