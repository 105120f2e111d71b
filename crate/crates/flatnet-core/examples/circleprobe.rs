// temporary probe
use flatnet_core::dataset;
use flatnet_core::local_model::Hyperparams;
use flatnet_core::network;

fn main() {
    for seed in [1u64, 2, 3] {
        let cloud = dataset::gen_circle(200, 1.0, 0.75, 0.0, seed).unwrap();
        let mut hp = Hyperparams::for_data(&cloud);
        hp.alpha_max = 0.5;
        hp.eps_dim = 3e-3 * cloud.total_variance();
        hp.halt.patience = 60;
        let model = network::construct(&cloud, &hp, seed).unwrap();
        let flat_tol_abs = hp.halt.flat_tol * model.log.first().unwrap().proxy_before.max(1e-300);
        let mut mono = 0;
        for rec in &model.log {
            if rec.proxy_after <= rec.proxy_before + flat_tol_abs {
                mono += 1;
            }
        }
        let initial = model.log.first().unwrap().proxy_before;
        let final_ = model.log.last().unwrap().proxy_after;
        let feats = model.flatten(&cloud).unwrap();
        let c = feats.centroid();
        let mut m = feats.data.clone();
        for i in 0..m.ncols() { let mut col = m.column_mut(i); col -= &c; }
        let svd = m.svd(false, false);
        println!(
            "seed={seed}: L={} proxy {initial:.3} -> {final_:.5}  mono {mono}/{}  s2/diam={:.2e}",
            model.layers.len(),
            model.log.len(),
            svd.singular_values[1] / cloud.diameter()
        );
    }
}
