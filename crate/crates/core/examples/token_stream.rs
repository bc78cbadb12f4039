//! Lays out a user stream and shows which keys each query may read under
//! the anchor mask.
use hisam::hmat::{AttnMask, MaskKind};
use hisam::seqstream::{build_stream, Interaction, Vocab};

fn main() -> hisam::Result<()> {
    let vocab = Vocab::new(vec![8, 8, 8], 2)?;
    let history = vec![
        Interaction { codes: vec![1, 2, 3], action: 1 },
        Interaction { codes: vec![4, 5, 6], action: 0 },
    ];
    let stream = build_stream(&[7, 7, 7], &history, &vocab)?;
    print!("{}", stream.debug_dump());
    let mask = AttnMask::build(stream.tokens(), MaskKind::MemoryAnchor);
    let dense = mask.to_dense();
    for (q, row) in dense.iter_rows().enumerate() {
        let line: String = row.iter().map(|&v| if v == 0.0 { '#' } else { '.' }).collect();
        println!("{q:>2} {line}");
    }
    println!("visible pairs: anchor {} vs causal {}", mask.pair_count(), AttnMask::build(stream.tokens(), MaskKind::Causal).pair_count());
    Ok(())
}
