"""Physical constants of the tissue model (mm / ms / mS units)."""

SIGMA_I = 0.174  # intracellular conductivity [mS/mm]
SIGMA_E = 0.625  # extracellular conductivity [mS/mm]
SIGMA_B = 1.0  # blood conductivity in the electrogram kernel [mS/mm]
CHI = 140.0  # cell surface-to-volume ratio [1/mm]
C_M = 0.01  # membrane capacitance [uF/mm^2]


def d_healthy(sigma_i: float = SIGMA_I, sigma_e: float = SIGMA_E,
              chi: float = CHI, cm: float = C_M) -> float:
    """Diffusion constant: harmonic-mean conductivity over chi * C_m [mm^2/ms]."""
    sigma = sigma_i * sigma_e / (sigma_i + sigma_e)
    return sigma / (chi * cm)
