"""Control mathematics: chain transforms, CBF chain, kernels and control laws."""
from .barrier import BarrierSpec, CBFChain, RescueFunction, NO_RESCUE, cbf_chain, make_rescue, rescue_sigma
from .control import (ControlBank, ThetaParams, UncertaintyBoxes, bank_over, estimate_xi_e, h_eD_bounds,
                      make_theta, nominal_control, output_control, rho_hat_gain, robust_control, select_gains)
from .kernels import KernelSet, forward_backstep, inverse_backstep, kernels
from .transforms import TransformCoeffs, first_transform, predict_state

__all__ = [
    "BarrierSpec", "CBFChain", "RescueFunction", "NO_RESCUE", "cbf_chain", "make_rescue", "rescue_sigma",
    "ControlBank", "ThetaParams", "UncertaintyBoxes", "bank_over", "estimate_xi_e", "h_eD_bounds",
    "make_theta", "nominal_control", "output_control", "rho_hat_gain", "robust_control", "select_gains",
    "KernelSet", "forward_backstep", "inverse_backstep", "kernels",
    "TransformCoeffs", "first_transform", "predict_state",
]
