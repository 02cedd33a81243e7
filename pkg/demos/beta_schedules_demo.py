"""The KL-weight schedules behind the model family, printed as ASCII charts.

beta controls the trade-off between reconstruction fidelity and a smooth,
disentangled latent space:

  AE / SAE          beta = 0        (pure reconstruction)
  VAE               beta = 1        (classic ELBO)
  BetaVAE           beta = 3        (stronger prior pull)
  CyclicalBetaVAE   triangle wave   (periodically releases the prior)
  AnnealedBetaVAE   linear decay    (starts smooth, ends reconstructive)

Run with:  python3 demos/beta_schedules_demo.py
"""

from ecglatent import BetaSchedule, VariantConfig, beta_at


def chart(schedule, epochs=60, height=8):
    values = [beta_at(schedule, e) for e in range(epochs)]
    peak = max(values) or 1.0
    rows = []
    for level in range(height, 0, -1):
        cut = peak * (level - 0.5) / height
        rows.append("".join("#" if v >= cut else " " for v in values))
    rows.append("-" * epochs)
    return "\n".join(rows), values


def main():
    for variant in ("SAE", "VAE", "BetaVAE", "CyclicalBetaVAE", "AnnealedBetaVAE"):
        config = VariantConfig.for_variant(variant)
        body, values = chart(config.schedule)
        print(f"\n{variant}  (kind={config.schedule.kind}, "
              f"beta at epochs 0/10/25/50: "
              f"{[round(beta_at(config.schedule, e), 2) for e in (0, 10, 25, 50)]})")
        print(body)

    # schedules are plain data; custom ones compose the same way
    custom = BetaSchedule("cyclical", cycle_peak=2.0, cycle_epochs=10)
    print("\ncustom cyclical (peak 2.0, period 10):")
    print(chart(custom, epochs=40)[0])


if __name__ == "__main__":
    main()
