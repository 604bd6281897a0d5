"""RGB to bridge-native HSB conversion and its inverse.

Plain HSV math, no color-appearance modeling. API unit ranges follow the
emulated bridge: hue 0..65535, sat 0..254, bri 1..254. Black maps to
on=false because "lights off" is the only physical rendering of black.
"""

from __future__ import annotations

from .model import ColorHSB, ColorRGB


def _round_half_up(x: float) -> int:
    import math

    return math.floor(x + 0.5)


def scale_hue(h_degrees: float) -> int:
    """Scale a hue angle to API units; full turns collapse before scaling."""
    h = h_degrees % 360.0
    return _round_half_up(h / 360.0 * 65535.0) % 65536


def rgb_to_hsb(c: ColorRGB) -> ColorHSB:
    r, g, b = c.r, c.g, c.b
    mx = max(r, g, b)
    mn = min(r, g, b)
    delta = mx - mn

    if delta == 0.0:
        h_degrees = 0.0
    elif mx == r:
        h_degrees = 60.0 * (((g - b) / delta) % 6.0)
    elif mx == g:
        h_degrees = 60.0 * ((b - r) / delta + 2.0)
    else:
        h_degrees = 60.0 * ((r - g) / delta + 4.0)

    sat = 0.0 if mx == 0.0 else delta / mx
    return ColorHSB(
        on=mx > 0.0,
        hue=scale_hue(h_degrees),
        sat=_round_half_up(sat * 254.0),
        bri=max(1, _round_half_up(mx * 254.0)),
    )


def hsb_to_rgb(c: ColorHSB) -> ColorRGB:
    if not c.on:
        return ColorRGB(0.0, 0.0, 0.0)

    h = (c.hue / 65535.0 * 360.0) % 360.0
    s = c.sat / 254.0
    v = c.bri / 254.0

    sector = h / 60.0
    i = int(sector) % 6
    f = sector - int(sector)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r, g, b = (
        (v, t, p),
        (q, v, p),
        (p, v, t),
        (p, q, v),
        (t, p, v),
        (v, p, q),
    )[i]
    return ColorRGB(r, g, b)
