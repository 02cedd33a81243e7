"""End-to-end walkthrough: synthesize ECGs, extract representative beats,
train a small autoencoder, and probe its 30-dim encodings.

Run with:  python3 demos/pipeline_demo.py
Takes about a minute on one CPU (small corpus, 1/16-scale network).
"""

import numpy as np

from ecglatent import (
    IncrementalPca,
    SyntheticBeatParams,
    VariantConfig,
    build_network,
    evaluate_probe,
    fit_linear_probe,
    generate_synthetic_ecg,
    load_kors_matrix,
    measure_dataset,
    random_beat_params,
    reconstruction_metrics,
    record_to_xyz_beat,
    scale_dataset,
    train,
)


def main():
    # ------------------------------------------------------------------
    # 1. a synthetic corpus with varied morphology and 10 uV noise
    rng = np.random.default_rng(0)
    kors = load_kors_matrix()
    beats = []
    for i in range(200):
        params = random_beat_params(rng, noise_std_uv=10.0)
        rec = generate_synthetic_ecg(params, duration_s=4.0, record_id=f"rec{i:03d}")
        beats.append(record_to_xyz_beat(rec, kors))
    print(f"extracted {len(beats)} X/Y/Z representative beats "
          f"({beats[0].samples.shape[0]} leads x {beats[0].samples.shape[1]} samples)")

    # ------------------------------------------------------------------
    # 2. scale to [-1, 1] and split
    raw = np.stack([b.samples for b in beats])
    scaled_beats, scaling = scale_dataset(beats)
    x = np.stack([b.samples for b in scaled_beats])
    tr, te = x[:150], x[150:]
    print(f"global abs max {scaling.abs_max:.1f} uV")

    # ------------------------------------------------------------------
    # 3. train a small sampling autoencoder
    config = VariantConfig.for_variant("SAE", scale=1 / 16, epochs=80, batch_size=32)
    model = build_network(config, init_seed=0)
    untrained_mae = float(np.abs(model.reconstruct(te) - te).mean())
    log = train(model, tr, config, seed=0)
    trained_mae = float(np.abs(model.reconstruct(te) - te).mean())
    print(f"loss {log[0].loss.total:.3f} -> {log[-1].loss.total:.3f} over {len(log)} epochs")
    print(f"held-out MAE (scaled units): {untrained_mae:.4f} untrained "
          f"-> {trained_mae:.4f} trained")

    # ------------------------------------------------------------------
    # 4. reconstruction metrics in microvolts on one held-out beat
    rec_uv = scaling.invert(model.reconstruct(te[:1])[0])
    report = reconstruction_metrics(raw[150], rec_uv)
    print(f"beat 150: MAE {report.mae_full:.1f} uV, DTW {report.dtw_full:.1f}")

    # ------------------------------------------------------------------
    # 5. do the 30 latent dims carry the voltage-time integral?
    vti = measure_dataset(raw)["vti_qrs_3d_uvs"]
    mu_tr = np.stack([e.mu for e in model.encode_batch(tr)])
    mu_te = np.stack([e.mu for e in model.encode_batch(te)])
    probe = fit_linear_probe(mu_tr, vti[:150])
    print(f"SAE VTI probe R2 = {evaluate_probe(probe, mu_te, vti[150:]).r2:.3f}")

    # ------------------------------------------------------------------
    # 6. and the linear baseline for comparison
    pca = IncrementalPca()
    pca.partial_fit(tr.reshape(150, -1))
    z_tr = pca.transform(tr.reshape(150, -1))
    z_te = pca.transform(te.reshape(50, -1))
    probe = fit_linear_probe(z_tr, vti[:150])
    print(f"PCA VTI probe R2 = {evaluate_probe(probe, z_te, vti[150:]).r2:.3f}")


if __name__ == "__main__":
    main()
