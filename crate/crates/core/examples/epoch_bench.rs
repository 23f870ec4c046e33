use std::time::Instant;

use moorelens::data::{Dataset, DatasetSpec, Sampling};
use moorelens::languages::{LanguageSpec, TaskKind};
use moorelens::metrics::f1_weighted;
use moorelens::net::{train, Hyper, Model, ModelConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lang: LanguageSpec = args[1].parse().unwrap();
    let seed: u64 = args[2].parse().unwrap();
    let epochs: usize = args[3].parse().unwrap();
    let spec = |count, len, seed| DatasetSpec {
        language: lang,
        task: TaskKind::StatePrediction,
        count,
        min_len: len,
        max_len: len,
        sampling: Sampling::Uniform,
        seed,
    };
    let tr = Dataset::generate(&spec(10_000, 32, 1)).unwrap().examples;
    let va = Dataset::generate(&spec(2_000, 100, 2)).unwrap().examples;
    let config = ModelConfig::for_task(lang, TaskKind::StatePrediction).unwrap();
    let hyper = Hyper { max_epochs: epochs, seed, ..Hyper::default() };
    let start = Instant::now();
    let r = train(Model::<f32>::init(config, seed).unwrap(), &tr, &va, &hyper, |r| {
        if r.epoch % 10 == 0 || r.epoch < 5 {
            println!("{} {:.6} {:.6} {:?}", r.epoch, r.train_loss, r.val_loss, start.elapsed());
        }
    })
    .unwrap();
    let f1 = |ex: &[moorelens::data::Example]| {
        let p: Vec<usize> = r.model.predict_examples(ex).unwrap().concat();
        let l: Vec<usize> = ex.iter().flat_map(|e| e.labels.clone()).collect();
        f1_weighted(&p, &l).unwrap()
    };
    println!("best {} train f1 {} val f1 {}", r.best_epoch, f1(&tr), f1(&va));
}
