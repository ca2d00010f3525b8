"""Recurrent dehazer with iteratively updated physical priors.

One iteration does three things, in order: the conv-LSTM trunk produces a new
dehazed image from the 14-channel stack of static inputs (hazy image, initial
transmission, initial atmospheric light) and dynamic inputs (previous dehazed
image, current transmission, current atmospheric light); then two updater
networks emit additive corrections -- a per-pixel one for the transmission map
and a single global per-channel one for the atmospheric light -- which are
added to the running priors under clamping.  All trunk/updater weights are
shared across time steps, so gradients accumulate over the unrolled loop.

Channel layout of the assembled input is frozen (see CHANNEL_LAYOUT); it is
fingerprinted into checkpoints because any silent reordering would corrupt
previously trained weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ParameterError, ShapeError
from .estimators import ParamBag, conv_init

FEATURES = 32
INPUT_CHANNELS = 14
RES_BLOCKS = 6
UPDATER_BLOCKS = 6
UPDATER_WIDTH = 32
TIME_STEPS_DEFAULT = 6
T_PRIME_FLOOR = 0.05

CHANNEL_LAYOUT = "hazy:3|trans:1|atmo:3|dyn_dehazed:3|dyn_trans:1|dyn_atmo:3"

_GATES = ("i", "f", "o", "g")


@dataclass
class DehazerParams:
    """Trunk weights: input conv, conv-LSTM gates, residual stack, output conv."""

    bag: ParamBag

    @staticmethod
    def create(rng: np.random.Generator, dtype=np.float64) -> "DehazerParams":
        bag = ParamBag()
        bag.add_conv(rng, "f_in", FEATURES, INPUT_CHANNELS, 3, dtype)
        for gate in _GATES:
            wy, _ = conv_init(rng, FEATURES, FEATURES, 3, dtype)
            ws, _ = conv_init(rng, FEATURES, FEATURES, 3, dtype)
            bag.add(f"lstm/w_{gate}y", wy)
            bag.add(f"lstm/w_{gate}s", ws)
        for gate in _GATES:
            # forget-gate bias starts at 1 so early training keeps its memory
            init = np.full(FEATURES, 1.0 if gate == "f" else 0.0, dtype=dtype)
            bag.add(f"lstm/b_{gate}", Tensor(init, requires_grad=True))
        for r in range(1, RES_BLOCKS + 1):
            bag.add_conv(rng, f"res{r}/c1", FEATURES, FEATURES, 3, dtype)
            bag.add_conv(rng, f"res{r}/c2", FEATURES, FEATURES, 3, dtype)
        # small head + mid-gray bias: initial outputs sit well inside [0, 1],
        # so the output clamp starts inactive and gradients flow everywhere
        wout, bout = conv_init(rng, 3, FEATURES, 3, dtype, scale=0.05)
        bout.data[:] = 0.5
        bag.add("f_out/w", wout)
        bag.add("f_out/b", bout)
        return DehazerParams(bag=bag)

    def named(self, prefix: str = "dehazer/") -> dict[str, Tensor]:
        return self.bag.named(prefix)


def _updater_bag(rng: np.random.Generator, in_channels: int, out_channels: int, dtype) -> ParamBag:
    bag = ParamBag()
    cin = in_channels
    for k in range(1, UPDATER_BLOCKS + 1):
        bag.add_conv(rng, f"c{k}", UPDATER_WIDTH, cin, 3, dtype)
        bag.add(f"a{k}", Tensor(np.full(UPDATER_WIDTH, 0.25, dtype=dtype), requires_grad=True))
        cin = UPDATER_WIDTH
    # small head so initial corrections start near zero and priors drift gently
    bag.add_conv(rng, "head", out_channels, cin, 3, dtype, scale=0.05)
    return bag


@dataclass
class UpdaterParams:
    """Both correction networks: per-pixel transmission and global atmospheric."""

    trans: ParamBag
    atmo: ParamBag

    @staticmethod
    def create(rng: np.random.Generator, dtype=np.float64) -> "UpdaterParams":
        return UpdaterParams(
            trans=_updater_bag(rng, 3 + 1 + 3 + 1, 1, dtype),
            atmo=_updater_bag(rng, 3 + 3 + 3 + 3, 3, dtype),
        )

    def named(self, prefix: str = "updaters/") -> dict[str, Tensor]:
        out = self.trans.named(prefix + "trans/")
        out.update(self.atmo.named(prefix + "atmo/"))
        return out


@dataclass
class IterationState:
    """Dynamic quantities after one iteration (step 0 is the initialization)."""

    i_prime: Tensor  # (N, 3, H, W) dehazed image
    t_prime: Tensor  # (N, 1, H, W) updated transmission
    a_prime: Tensor  # (N, 3, 1, 1) updated atmospheric light
    h: Tensor  # (N, FEATURES, H, W) recurrent state
    c: Tensor  # (N, FEATURES, H, W) cell state
    step: int


def _check_inputs(img: Tensor, trans: Tensor, atmo: Tensor):
    if img.data.ndim != 4 or img.shape[1] != 3:
        raise ShapeError(f"image must be (N, 3, H, W), got {img.shape}")
    n, _, h, w = img.shape
    if trans.shape != (n, 1, h, w):
        raise ShapeError(f"transmission must be {(n, 1, h, w)}, got {trans.shape}")
    if atmo.shape != (n, 3, 1, 1):
        raise ShapeError(f"atmospheric light must be {(n, 3, 1, 1)}, got {atmo.shape}")


def initial_state(img: Tensor, trans: Tensor, atmo: Tensor) -> IterationState:
    """Step-0 state: dehazed = hazy input, priors = initial estimates, zero memory."""
    _check_inputs(img, trans, atmo)
    n, _, h, w = img.shape
    zeros = np.zeros((n, FEATURES, h, w), dtype=img.dtype)
    return IterationState(
        i_prime=img,
        t_prime=trans,
        a_prime=atmo,
        h=Tensor(zeros),
        c=Tensor(zeros.copy()),
        step=0,
    )


def _as_plane(t: Tensor, h: int, w: int) -> Tensor:
    """Broadcast (N, C, 1, 1) scalars to a plane; full-res maps pass through."""
    return ad.broadcast_spatial(t, h, w) if t.shape[2:] == (1, 1) else t


def assemble_input(img: Tensor, trans: Tensor, atmo: Tensor, state: IterationState) -> Tensor:
    """Stack static and dynamic planes into the fixed 14-channel layout."""
    _check_inputs(img, trans, atmo)
    h, w = img.shape[2:]
    return ad.concat_channels(
        [
            img,
            trans,
            ad.broadcast_spatial(atmo, h, w),
            state.i_prime,
            state.t_prime,
            _as_plane(state.a_prime, h, w),
        ]
    )


def conv_lstm_step(y: Tensor, h_prev: Tensor, c_prev: Tensor, params: DehazerParams) -> tuple[Tensor, Tensor]:
    """One convolutional LSTM transition.

    Gates are sigmoid(W*y + W*h + b) convolutions (tanh for the candidate);
    the four y-kernels and four h-kernels are concatenated into two fused
    convolutions for speed, which is algebraically identical to running the
    eight gate convolutions separately.
    """
    bag = params.bag
    wy = ad.concat([bag[f"lstm/w_{g}y"] for g in _GATES], axis=0)
    wh = ad.concat([bag[f"lstm/w_{g}s"] for g in _GATES], axis=0)
    by = ad.concat([bag[f"lstm/b_{g}"] for g in _GATES], axis=0)
    pre = ad.conv2d(y, wy, by, stride=1, padding=1) + ad.conv2d(h_prev, wh, None, stride=1, padding=1)
    f = FEATURES
    gi = ad.sigmoid(ad.slice_channels(pre, 0, f))
    gf = ad.sigmoid(ad.slice_channels(pre, f, 2 * f))
    go = ad.sigmoid(ad.slice_channels(pre, 2 * f, 3 * f))
    gg = ad.tanh(ad.slice_channels(pre, 3 * f, 4 * f))
    c = gf * c_prev + gi * gg
    h = go * ad.tanh(c)
    return h, c


def _res_trunk(h: Tensor, bag: ParamBag) -> Tensor:
    out = h
    for r in range(1, RES_BLOCKS + 1):
        inner = ad.relu(ad.conv2d(out, bag[f"res{r}/c1/w"], bag[f"res{r}/c1/b"], stride=1, padding=1))
        inner = ad.conv2d(inner, bag[f"res{r}/c2/w"], bag[f"res{r}/c2/b"], stride=1, padding=1)
        out = out + inner
    return out


def dehaze_step(
    img: Tensor, trans: Tensor, atmo: Tensor, state: IterationState, params: DehazerParams
) -> tuple[Tensor, Tensor, Tensor]:
    """One trunk pass: returns (next dehazed image in [0, 1], h, c)."""
    x = assemble_input(img, trans, atmo, state)
    y = ad.relu(ad.conv2d(x, params.bag["f_in/w"], params.bag["f_in/b"], stride=1, padding=1))
    h, c = conv_lstm_step(y, state.h, state.c, params)
    out = ad.conv2d(_res_trunk(h, params.bag), params.bag["f_out/w"], params.bag["f_out/b"], stride=1, padding=1)
    return ad.clamp(out, 0.0, 1.0), h, c


def _updater_forward(x: Tensor, bag: ParamBag) -> Tensor:
    h = x
    for k in range(1, UPDATER_BLOCKS + 1):
        h = ad.prelu(ad.conv2d(h, bag[f"c{k}/w"], bag[f"c{k}/b"], stride=1, padding=1), bag[f"a{k}"])
    return ad.tanh(ad.conv2d(h, bag["head/w"], bag["head/b"], stride=1, padding=1))


def update_transmission(img: Tensor, trans: Tensor, i_prime: Tensor, t_prime_prev: Tensor, params: UpdaterParams) -> Tensor:
    """Per-pixel transmission correction in (-1, 1), shape (N, 1, H, W)."""
    x = ad.concat_channels([img, trans, i_prime, t_prime_prev])
    return _updater_forward(x, params.trans)


def update_atmospheric(
    img: Tensor, atmo: Tensor, i_prime: Tensor, a_prime_prev: Tensor, params: UpdaterParams, mode: str = "global"
) -> Tensor:
    """Atmospheric-light correction in (-1, 1).

    In the default ``global`` mode the tanh correction map is averaged over
    all pixels, so the applied update is a per-channel scalar (N, 3, 1, 1),
    constant across the spatial domain by construction.  ``local`` keeps the
    per-pixel map (N, 3, H, W); it exists for the locality ablation.
    """
    if mode not in ("global", "local"):
        raise ParameterError(f"mode must be 'global' or 'local', got {mode!r}")
    h, w = img.shape[2:]
    x = ad.concat_channels(
        [img, ad.broadcast_spatial(atmo, h, w), i_prime, _as_plane(a_prime_prev, h, w)]
    )
    delta = _updater_forward(x, params.atmo)
    return ad.global_pool(delta, "avg") if mode == "global" else delta


def run_ipudn(
    img: Tensor,
    trans: Tensor,
    atmo: Tensor,
    dehazer: DehazerParams,
    updaters: UpdaterParams,
    t1: int = TIME_STEPS_DEFAULT,
    t_floor: float = T_PRIME_FLOOR,
    atmo_update: str = "global",
) -> tuple[Tensor, list[IterationState]]:
    """Run the full iterative loop; returns the final image and the t1 states.

    Each returned state holds the dehazed image, priors, and recurrent memory
    after its step; the step-0 initialization is available via initial_state.
    """
    if t1 < 1:
        raise ParameterError(f"t1={t1} must be >= 1")
    h_dim, w_dim = img.shape[2:]
    state = initial_state(img, trans, atmo)
    trajectory: list[IterationState] = []
    for t in range(1, t1 + 1):
        i_prime, h, c = dehaze_step(img, trans, atmo, state, dehazer)
        dt = update_transmission(img, trans, i_prime, state.t_prime, updaters)
        da = update_atmospheric(img, atmo, i_prime, state.a_prime, updaters, mode=atmo_update)
        t_prime = ad.clamp(state.t_prime + dt, t_floor, 1.0)
        a_prev = state.a_prime if atmo_update == "global" else _as_plane(state.a_prime, h_dim, w_dim)
        a_prime = ad.clamp(a_prev + da, 0.0, 1.0)
        state = IterationState(i_prime=i_prime, t_prime=t_prime, a_prime=a_prime, h=h, c=c, step=t)
        trajectory.append(state)
    return trajectory[-1].i_prime, trajectory
