//! Generate a small synthetic dataset with known edges of all four types.
//!
//! Usage: cargo run --release --example make_toy_data -- <out_dir> [n_train] [n_test] [size]

use rindnet::dataio::synth;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let Some(out) = args.get(1) else {
        eprintln!("usage: make_toy_data <out_dir> [n_train] [n_test] [size]");
        std::process::exit(2);
    };
    let n_train: usize = args.get(2).map_or(4, |s| s.parse().expect("n_train"));
    let n_test: usize = args.get(3).map_or(2, |s| s.parse().expect("n_test"));
    let size: usize = args.get(4).map_or(64, |s| s.parse().expect("size"));
    match synth::write_dataset(std::path::Path::new(out), n_train, n_test, size, 17) {
        Ok(ids) => println!("wrote {} scenes ({size}x{size}) to {out}", ids.len()),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
