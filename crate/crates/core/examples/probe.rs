//! scratch probe (removed before release)
use lfds_core::config::RunConfig;
use lfds_core::data::{generate_separable, make_folds};
use lfds_core::train::*;

fn main() {
    let ds = generate_separable(50, 7);
    // emulate different B inits by overriding the bank after construction
    for (name, hi, lo) in [("loopwarm", 2.0, -2.0)] {
        for m in [8usize, 16] { for batch in [2usize, 4, 8] { for tseed in [7u64, 11, 23, 42] {
            let mut run = RunConfig::template();
            run.set("data", "separable").unwrap();
            run.set("seed", &tseed.to_string()).unwrap();
            run.set("head.kind", "param-spatial").unwrap();
            run.set("head.m", &m.to_string()).unwrap();
            run.epochs = 30;
            run.batch_size = batch;
            run.folds = 5;
            let split = make_folds(&ds, run.folds, run.seed).unwrap();
            let train_idx = split.train_indices(0);
            let test_idx = split.test_indices(0);
            // train_fold but with B re-initialized: replicate inline
            use lfds_core::data::derive_seed;
            use lfds_core::tensor::{AdamState, Mode, Tape};
            use rand::{Rng, SeedableRng};
            let cfg = ModelConfig::from_run(&run, ds.feature_dim, ds.num_classes);
            let mut model = GraphClassifier::new(cfg, derive_seed(run.seed, 0)).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(run.seed, 0x7F00D));
            if name != "n01" {
                let b = model.head.as_ref().unwrap().learned_pre_adjacency().unwrap();
                let data = &mut model.bank.get_mut(b).data;
                for i in 0..m {
                    for j in 0..m {
                        let neighbor = (i + 1) % m == j || (j + 1) % m == i;
                        data[i * m + j] = 0.5 * (if neighbor { hi } else { lo }) + 0.05 * rng.gen_range(-1.0..1.0f64);
                    }
                }
            }
            let mut adam = AdamState::new();
            let mut order = train_idx.clone();
            let mut best = 0.0f64;
            let mut first95 = None;
            for epoch in 0..run.epochs {
                let lr = lr_schedule(epoch, run.epochs, run.lr_start, run.lr_end);
                for i in (1..order.len()).rev() {
                    let j = rng.gen_range(0..=i);
                    order.swap(i, j);
                }
                for chunk in order.chunks(run.batch_size) {
                    for &i in chunk {
                        let mut tape = Tape::new();
                        let out = model.loss(&mut tape, &ds.samples[i], Mode::Train, &mut rng).unwrap();
                        tape.backward(out.total).unwrap();
                        tape.accumulate_into(&mut model.bank);
                    }
                    for id in model.bank.trainable_ids() {
                        if let Some(g) = model.bank.get_mut(id).grad.as_mut() {
                            let f = 1.0 / chunk.len() as f64;
                            g.iter_mut().for_each(|v| *v *= f);
                        }
                    }
                    adam.step(&mut model.bank, lr).unwrap();
                    model.commit_running_stats();
                }
                let (acc, _) = evaluate(&mut model, &ds, &test_idx).unwrap();
                best = best.max(acc);
                if acc >= 0.95 && first95.is_none() { first95 = Some(epoch); }
            }
            println!("{name} m={m} b={batch} tseed={tseed}: best {best:.2} first95 {first95:?}"); } }
        }
    }
}
