"""Column scales and the characteristic magnitudes derived from them.

Networks predict ``field / scale``; residuals are assembled in physical units
and divided by a characteristic magnitude before squaring. With the identity
record every scale is 1 and every loss term is in raw units.
"""

from __future__ import annotations

from dataclasses import dataclass, field

STRESS_COLUMNS = ("sxx", "syy", "szz", "sxy")
DISPLACEMENT_COLUMNS = ("ux", "uy")


@dataclass
class NormalizationRecord:
    scales: dict[str, float] = field(default_factory=dict)

    def scale(self, column: str) -> float:
        return float(self.scales.get(column, 1.0))

    @property
    def is_identity(self) -> bool:
        return all(v == 1.0 for v in self.scales.values())

    @property
    def length(self) -> float:
        return self.scale("length")

    @property
    def stress(self) -> float:
        present = [self.scales[c] for c in STRESS_COLUMNS if c in self.scales]
        return float(max(present)) if present else 1.0

    @property
    def strain(self) -> float:
        present = [self.scales[c] for c in DISPLACEMENT_COLUMNS if c in self.scales]
        return (float(max(present)) if present else 1.0) / self.length

    @property
    def modulus(self) -> float:
        return self.stress / self.strain

    @property
    def momentum(self) -> float:
        return max(self.scale("fx"), self.scale("fy"), self.stress / self.length)

    def param_scale(self, name: str) -> float:
        """Scale between a trained (normalized) material parameter and its physical value."""
        if name in self.scales:
            return float(self.scales[name])
        if name == "sigma_y":
            return self.stress
        return self.modulus

    def to_dict(self) -> dict[str, float]:
        return {k: float(v) for k, v in self.scales.items()}

    @classmethod
    def from_dict(cls, d) -> "NormalizationRecord":
        return cls({k: float(v) for k, v in (d or {}).items()})
