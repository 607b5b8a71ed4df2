//! Wall time of one default-config training step, broken down by op.

use std::time::Instant;

use stpnet::losses::Lambdas;
use stpnet::synthgen::{batch_tensors, generate_split, GenConfig};
use stpnet::{ForwardOptions, StpnetConfig, StpnetModel};
use stpnet_autodiff::Graph;

fn main() {
    let cfg = StpnetConfig::default();
    let bank = cfg.text_bank().unwrap();
    let split = generate_split(0, 8, 1, 1, &GenConfig::default()).unwrap();
    let mut model = StpnetModel::<f32>::new(&cfg).unwrap();
    let batch: Vec<_> = split.train.iter().collect();
    let (img, masks) = batch_tensors::<f32>(&batch).unwrap();
    let labels: Vec<_> = batch.iter().map(|s| s.labels).collect();
    let t = Instant::now();
    let mut g = Graph::new(&mut model.store, true);
    g.tape.enable_profiling();
    let out = model.net.forward(&mut g, &img, &bank, ForwardOptions::default(), None).unwrap();
    let (loss, _) = model.net.loss(&mut g, &out, &masks, &labels, &bank, Lambdas::default()).unwrap();
    let t_fwd = t.elapsed();
    g.backward(loss).unwrap();
    println!("forward {t_fwd:?}, total {:?}", t.elapsed());
    let mut rows: Vec<_> = g.tape.profile().unwrap().ops.iter().map(|(k, v)| (*k, *v)).collect();
    rows.sort_by_key(|(_, v)| std::cmp::Reverse(v.forward + v.backward));
    for (op, v) in rows {
        println!("{op:>24} n={:<4} fwd {:>8.1?} bwd {:>8.1?}", v.count, v.forward, v.backward);
    }
}
