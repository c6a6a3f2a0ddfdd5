use dln::data::{preprocess, Column, FeatureMatrix};
use dln::{balanced_accuracy, DlnModel, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn task(n: usize, seed: u64, xor: bool) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen(), rng.gen()]).collect();
    let labels: Vec<String> = rows
        .iter()
        .map(|r| {
            let (a, b) = (r[0] > 0.5, r[1] > 0.5);
            let y = if xor { a != b } else { a && b };
            (y as u8).to_string()
        })
        .collect();
    FeatureMatrix::from_label_names(vec![Column::raw("x0"), Column::raw("x1")], rows, &labels)
}

fn main() {
    let xor = std::env::args().any(|a| a == "xor");
    let train = task(1000, 1, xor);
    let test = task(1000, 2, xor);
    let (train, test, _) = preprocess(&train, &test, 10).unwrap();
    for seed in 0..5 {
        let cfg = TrainConfig { seed, ..TrainConfig::default() };
        let t = std::time::Instant::now();
        let mut m = DlnModel::build(&cfg, &train).unwrap();
        let hist = m.train(&train).unwrap();
        let tr = balanced_accuracy(&train.labels, &m.predict(&train).unwrap()).unwrap();
        let te = balanced_accuracy(&test.labels, &m.predict(&test).unwrap()).unwrap();
        println!("seed {seed}: loss {:.4} train {tr:.4} test {te:.4} ({:.1?})", hist.last().unwrap().loss, t.elapsed());
    }
}
