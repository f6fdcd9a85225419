"""Per-sample l-inf bounded noise by signed gradient descent toward shifted labels."""

import logging
from typing import Literal, Union

import torch
from pydantic import BaseModel, ConfigDict, Field

from .config import DEFAULT_BETA, DEFAULT_DELTA_Y, DEFAULT_EPSILON, DEFAULT_PGD_STEPS
from .errors import ErrorCode, ToolkitError, require
from .model_zoo import ModelGallery, ensemble_input_gradient

LOG = logging.getLogger(__name__)


class ShiftRule(BaseModel):
    """y -> (y + delta_y) mod k; any integer delta_y is reduced mod k."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    delta_y: int = DEFAULT_DELTA_Y
    k: int = Field(10, ge=1)

    def permutation(self) -> list:
        return [shift_label(y, self) for y in range(self.k)]


class PGDConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epsilon: float = Field(DEFAULT_EPSILON, gt=0)
    beta: float = Field(DEFAULT_BETA, gt=0)
    steps: int = Field(DEFAULT_PGD_STEPS, ge=1)
    # "pixel": beta is an absolute step; "epsilon": the step is beta * epsilon
    step_units: Literal["pixel", "epsilon"] = "pixel"

    @property
    def step_size(self) -> float:
        return self.beta * self.epsilon if self.step_units == "epsilon" else self.beta


def shift_label(y: Union[int, torch.Tensor], rule: ShiftRule) -> Union[int, torch.Tensor]:
    if isinstance(y, torch.Tensor):
        require(bool(((y >= 0) & (y < rule.k)).all()), f"labels must lie in [0, {rule.k})")
        return torch.remainder(y + rule.delta_y, rule.k)
    require(0 <= y < rule.k, f"label {y} outside [0, {rule.k})")
    return (y + rule.delta_y) % rule.k


def project_linf(x: torch.Tensor, x0: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Clip x elementwise into [x0 - epsilon, x0 + epsilon]."""
    require(x.shape == x0.shape, f"shape mismatch: {tuple(x.shape)} vs {tuple(x0.shape)}")
    require(epsilon > 0, f"epsilon must be positive, got {epsilon}")
    return torch.min(torch.max(x, x0 - epsilon), x0 + epsilon)


def pgd_toward_shift_label(x: torch.Tensor, y: Union[int, torch.Tensor], gallery: ModelGallery,
                           rule: ShiftRule, cfg: PGDConfig) -> torch.Tensor:
    """Run ``cfg.steps`` signed descent steps on the ensemble cross-entropy toward
    the shifted label and return delta_s = x^T - x^0.

    ``x`` is one image (C, H, W) or a batch (B, C, H, W); ``y`` matches. The
    loss is summed over the batch so each sample's gradient is exactly its
    own, and batched runs agree with per-sample runs. No [0, 1] clamp happens
    here; only the epsilon box is enforced.
    """
    single = x.dim() == 3
    x0 = (x.unsqueeze(0) if single else x).detach()
    labels = torch.as_tensor(y, dtype=torch.long).reshape(-1)
    require(len(labels) == len(x0), f"{len(labels)} labels for {len(x0)} images")
    target = shift_label(labels, rule)
    step = cfg.step_size

    xt = x0.clone()
    for t in range(cfg.steps):
        g = ensemble_input_gradient(gallery, xt, target, reduction="sum")
        if not torch.isfinite(g).all():
            raise ToolkitError(f"Non-finite ensemble gradient at PGD iteration {t}",
                               ErrorCode.OPTIMIZATION_FAILED, {"iteration": t})
        xt = project_linf(xt - step * torch.sign(g), x0, cfg.epsilon)

    delta = xt - x0
    return delta[0] if single else delta
