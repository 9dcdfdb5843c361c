"""
Tests for masklet.losses module.

Tests cover each loss term on hand-computed toys and a finite-difference
check of the complete objective.
"""

import math

import numpy as np
import pytest

from masklet.autodiff import ParameterSet
from masklet.autodiff import Tensor
from masklet.autodiff import grad_check
from masklet.exceptions import ConfigError
from masklet.exceptions import ContractError
from masklet.losses import LossParts
from masklet.losses import RegularizationTargets
from masklet.losses import current_loss
from masklet.losses import output_regularizer
from masklet.losses import target_regularizer
from masklet.losses import total_loss
from masklet.masking import SemiBinaryMask
from masklet.masking import SparsitySchedule
from masklet.networks import HypernetworkSpec
from masklet.networks import TargetSpec
from masklet.networks import hyper_forward
from masklet.networks import init_parameters
from masklet.networks import target_forward


@pytest.fixture
def scalar_hnet() -> tuple[HypernetworkSpec, ParameterSet]:
    """One-weight hypernetwork mapping e = 1 to tanh(atanh(0.5)) = 0.5."""
    spec = HypernetworkSpec(1, (), (("w", (1,)),))
    phi = ParameterSet.from_arrays(
        {"layer0.weight": [[math.atanh(0.5)]], "layer0.bias": [0.0]}, requires_grad=True
    )
    return spec, phi


class TestCurrentLoss:
    """Test the classification term."""

    def test_uniform_binary(self) -> None:
        """Test equal logits over two classes give ln 2."""
        assert current_loss(Tensor(np.zeros((3, 2))), [0, 1, 1]).item() == pytest.approx(math.log(2.0))

    def test_perfect_prediction(self) -> None:
        """Test confident correct logits give nearly zero loss."""
        assert current_loss(Tensor([[40.0, -40.0]]), [0]).item() < 1e-12


class TestRegularizationTargets:
    """Test task-start snapshots."""

    def test_snapshot_does_not_follow_updates(self, scalar_hnet) -> None:
        """Test that phi_star and the stored masks stay fixed while phi moves."""
        spec, phi = scalar_hnet
        reg = RegularizationTargets.capture(phi, {0: np.array([1.0])}, spec)
        stored = reg.stored_masks[0].copy()
        phi["layer0.weight"].data += 1.0
        assert reg.phi_star["layer0.weight"].data[0, 0] == pytest.approx(math.atanh(0.5))
        np.testing.assert_array_equal(reg.stored_masks[0], stored)
        assert reg.stored_masks[0][0] == pytest.approx(0.5)
        assert reg.theta_star is None

    def test_no_previous_tasks(self, scalar_hnet) -> None:
        """Test capture on the first task stores nothing."""
        spec, phi = scalar_hnet
        assert RegularizationTargets.capture(phi, {}, spec).stored_masks == {}


class TestOutputRegularizer:
    """Test the stored-mask distance."""

    def test_zero_at_snapshot(self, scalar_hnet) -> None:
        """Test that phi == phi_star gives exactly zero."""
        spec, phi = scalar_hnet
        reg = RegularizationTargets.capture(phi, {0: np.array([1.0])}, spec)
        assert output_regularizer(phi, reg, 1, spec).item() == 0.0

    def test_single_previous_task(self, scalar_hnet) -> None:
        """Test stored 0.3 against current 0.5 gives 0.04."""
        spec, phi = scalar_hnet
        reg = RegularizationTargets(
            phi_star=phi.snapshot(),
            stored_masks={0: np.array([0.3])},
            embeddings={0: np.array([1.0])},
        )
        assert output_regularizer(phi, reg, 1, spec).item() == pytest.approx(0.04, abs=1e-12)

    def test_averages_over_previous_tasks(self, scalar_hnet) -> None:
        """Test (d1^2 + d2^2) / 2 for two previous tasks."""
        spec, phi = scalar_hnet
        reg = RegularizationTargets(
            phi_star=phi.snapshot(),
            stored_masks={0: np.array([0.3]), 1: np.array([-0.1])},
            embeddings={0: np.array([1.0]), 1: np.array([-1.0])},
        )
        assert output_regularizer(phi, reg, 2, spec).item() == pytest.approx(0.1, abs=1e-12)

    def test_gradient_reaches_phi(self, scalar_hnet) -> None:
        """Test that the hypernetwork weights receive a gradient."""
        spec, phi = scalar_hnet
        reg = RegularizationTargets(
            phi_star=phi.snapshot(),
            stored_masks={0: np.array([0.3])},
            embeddings={0: np.array([1.0])},
        )
        output_regularizer(phi, reg, 1, spec).backward()
        # d/dw (tanh(w) - 0.3)^2 = 2 * 0.2 * (1 - 0.25)
        assert phi["layer0.weight"].grad is not None
        assert phi["layer0.weight"].grad[0, 0] == pytest.approx(0.3, abs=1e-12)

    def test_first_task_rejected(self, scalar_hnet) -> None:
        """Test task 0 has nothing to regularize against."""
        spec, phi = scalar_hnet
        reg = RegularizationTargets.capture(phi, {}, spec)
        with pytest.raises(ContractError):
            output_regularizer(phi, reg, 0, spec)

    def test_missing_stored_mask(self, scalar_hnet) -> None:
        """Test a previous task without a stored mask."""
        spec, phi = scalar_hnet
        reg = RegularizationTargets.capture(phi, {0: np.array([1.0])}, spec)
        with pytest.raises(ContractError, match=r"\[1\]"):
            output_regularizer(phi, reg, 2, spec)


class TestTargetRegularizer:
    """Test the L1 drift of the target network."""

    @pytest.fixture
    def reg(self) -> RegularizationTargets:
        return RegularizationTargets(
            phi_star=ParameterSet(), theta_star=ParameterSet.from_arrays({"w": [1.0, 2.0]})
        )

    @pytest.fixture
    def theta(self) -> ParameterSet:
        return ParameterSet.from_arrays({"w": [1.5, 1.0]}, requires_grad=True)

    def test_zero_at_snapshot(self, reg: RegularizationTargets) -> None:
        """Test theta == theta_star gives zero."""
        theta = ParameterSet.from_arrays({"w": [1.0, 2.0]})
        assert target_regularizer(theta, reg, None, masked=False).item() == 0.0

    def test_unmasked(self, reg: RegularizationTargets, theta: ParameterSet) -> None:
        """Test sum |theta_star - theta| = 1.5."""
        assert target_regularizer(theta, reg, None, masked=False).item() == pytest.approx(1.5)

    def test_masked(self, reg: RegularizationTargets, theta: ParameterSet) -> None:
        """Test mask {0, 0.5} gives 0.5."""
        mask = SemiBinaryMask({"w": Tensor([0.0, 0.5])})
        assert target_regularizer(theta, reg, mask, masked=True).item() == pytest.approx(0.5)

    def test_signed_and_absolute_mask(self, reg: RegularizationTargets, theta: ParameterSet) -> None:
        """Test a negative mask value under both weightings."""
        mask = SemiBinaryMask({"w": Tensor([0.0, -0.5])})
        signed = target_regularizer(theta, reg, mask, masked=True)
        absolute = target_regularizer(theta, reg, mask, masked=True, absolute=True)
        assert signed.item() == pytest.approx(-0.5)
        assert absolute.item() == pytest.approx(0.5)

    def test_missing_snapshot(self, theta: ParameterSet) -> None:
        """Test regularizing without theta_star."""
        reg = RegularizationTargets(phi_star=ParameterSet())
        with pytest.raises(ContractError):
            target_regularizer(theta, reg, None, masked=False)

    def test_masked_needs_mask(self, reg: RegularizationTargets, theta: ParameterSet) -> None:
        """Test the masked variant without a mask."""
        with pytest.raises(ContractError):
            target_regularizer(theta, reg, None, masked=True)


class TestTotalLoss:
    """Test combining the terms."""

    @pytest.fixture
    def parts(self) -> LossParts:
        return LossParts(Tensor(2.0), Tensor(0.5), Tensor(3.0))

    def test_first_task_is_current_only(self, parts: LossParts) -> None:
        """Test t = 0 returns the classification term."""
        assert total_loss(parts, 0.2, 0.1, True, 0) is parts.current

    def test_hand_computed(self, parts: LossParts) -> None:
        """Test 2 + 0.2 * 0.5 + 0.1 * 3 = 2.4."""
        assert total_loss(parts, 0.2, 0.1, True, 1).item() == pytest.approx(2.4)

    def test_zero_weights(self, parts: LossParts) -> None:
        """Test beta = lam = 0 reduces to the current loss."""
        assert total_loss(parts, 0.0, 0.0, True, 1).item() == 2.0

    def test_fixed_target_ignores_target_term(self, parts: LossParts) -> None:
        """Test the target term is dropped for a fixed target."""
        assert total_loss(parts, 0.2, 0.1, False, 1).item() == pytest.approx(2.1)

    @pytest.mark.parametrize(("beta", "lam", "key"), [(-1.0, 0.1, "beta"), (0.1, -0.5, "lam")])
    def test_negative_weights(self, parts: LossParts, beta: float, lam: float, key: str) -> None:
        """Test negative weights are configuration errors naming the key."""
        with pytest.raises(ConfigError) as excinfo:
            total_loss(parts, beta, lam, True, 1)
        assert excinfo.value.key == key

    def test_missing_output_term(self) -> None:
        """Test a later task without the output term."""
        with pytest.raises(ContractError):
            total_loss(LossParts(Tensor(1.0)), 0.1, 0.1, False, 1)

    def test_values(self, parts: LossParts) -> None:
        """Test scalar extraction of present terms."""
        assert parts.values() == {"current": 2.0, "output": 0.5, "target": 3.0}
        assert LossParts(Tensor(1.0)).values() == {"current": 1.0}


class TestFullObjectiveGradient:
    """Finite-difference check of the complete objective."""

    @pytest.fixture
    def toy(self) -> dict:
        """Toy target and hypernetwork moved away from their task-start snapshot."""
        rng = np.random.default_rng(0)
        tspec = TargetSpec(3, (2,), 2, 2)
        hspec = HypernetworkSpec(2, (3,), tspec.layout())
        phi = init_parameters(hspec.layout(), rng)
        theta = init_parameters(tspec.layout(), rng)
        earlier = Tensor([0.4, -0.9], requires_grad=True)
        reg = RegularizationTargets.capture(phi, {0: earlier.data}, hspec, theta)

        # move away from the snapshot so |theta_star - theta| has no kink nearby
        for _, t in phi.items():
            t.data += rng.normal(scale=0.05, size=t.shape)
        for _, t in theta.items():
            t.data += rng.uniform(0.05, 0.15, size=t.shape) * rng.choice([-1.0, 1.0], size=t.shape)

        return {
            "tspec": tspec,
            "hspec": hspec,
            "phi": phi,
            "theta": theta,
            "earlier": earlier,
            "embedding": Tensor([0.8, -0.6], requires_grad=True),
            "reg": reg,
            "x": rng.normal(size=(5, 3)),
            "y": [0, 1, 1, 0, 1],
        }

    @staticmethod
    def _objective(toy: dict, task: int, schedule: SparsitySchedule | None) -> Tensor:
        mask = hyper_forward(toy["embedding"], toy["phi"], toy["hspec"], schedule)
        logits = target_forward(toy["x"], toy["theta"], mask, task, toy["tspec"])
        parts = LossParts(current_loss(logits, toy["y"]))
        if task > 0:
            parts.output = output_regularizer(toy["phi"], toy["reg"], task, toy["hspec"])
            parts.target = target_regularizer(toy["theta"], toy["reg"], mask, masked=True)
        return total_loss(parts, 0.5, 0.1, True, task)

    @staticmethod
    def _params(toy: dict) -> ParameterSet:
        return ParameterSet(
            {
                **{f"phi/{n}": t for n, t in toy["phi"].items()},
                **{f"theta/{n}": t for n, t in toy["theta"].items()},
                "embedding": toy["embedding"],
            }
        )

    def test_grad_check(self, toy: dict) -> None:
        """Test analytic gradients of L_current + beta L_output + lam masked L1."""
        params = self._params(toy)
        assert params.num_parameters <= 200
        assert grad_check(lambda: self._objective(toy, 1, None), params) < 1e-4

    @pytest.mark.parametrize(
        ("task", "schedule"),
        [
            (0, SparsitySchedule(30.0, 10, 0, 5)),
            (1, SparsitySchedule(30.0, 10, 1, 5)),
        ],
    )
    def test_grad_check_sparsified(
        self, toy: dict, task: int, schedule: SparsitySchedule
    ) -> None:
        """Test gradients flow through the kept entries of a thresholded mask."""
        mask = hyper_forward(toy["embedding"], toy["phi"], toy["hspec"], schedule)
        assert mask.zero_fraction() > 0.0
        params = self._params(toy)
        assert grad_check(lambda: self._objective(toy, task, schedule), params) < 1e-4

    def test_earlier_embedding_gets_no_gradient(self, toy: dict) -> None:
        """Test the embedding of a trained task stays out of the backward pass."""
        loss = self._objective(toy, 1, SparsitySchedule(30.0, 10, 1, 5))
        loss.backward()
        earlier = toy["earlier"].grad
        assert earlier is None or not np.any(earlier)
        assert toy["embedding"].grad is not None
        assert np.any(toy["embedding"].grad)
