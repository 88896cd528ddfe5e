"""Authoring helper for the engine layouts shipped in data/layouts/.

Writes mini.layout.json (24 controllers, 8 slots) and toy.layout.json, which
reuses the mini primitives but binds only the toy schema's controllers and
slots. Coordinates are image-normalized, y pointing down.
"""
import json
import pathlib

OUT = pathlib.Path(__file__).resolve().parents[1] / "layouts"

SKIN = [0.85, 0.68, 0.56]
HAIR = [0.24, 0.16, 0.10]


def prim(name, layer, front, side, kind="ellipse"):
    return {"name": name, "layer": layer, "kind": kind, "front": front, "side": side}


def pl(cx, cy, rx, ry, color, **kw):
    d = {"cx": cx, "cy": cy, "rx": rx, "ry": ry, "color": color}
    d.update(kw)
    return d


PRIMITIVES = [
    prim("ear_l", 1, pl(0.235, 0.47, 0.05, 0.08, SKIN), None),
    prim("ear_r", 1, pl(0.765, 0.47, 0.05, 0.08, SKIN), pl(0.43, 0.47, 0.055, 0.085, SKIN)),
    prim("cranium", 2, pl(0.5, 0.43, 0.25, 0.29, SKIN), pl(0.46, 0.43, 0.27, 0.29, SKIN)),
    prim("jaw", 2, pl(0.5, 0.6, 0.2, 0.2, SKIN), pl(0.52, 0.6, 0.2, 0.19, SKIN)),
    prim("ear_canal", 3, None, pl(0.43, 0.47, 0.018, 0.03, [0.62, 0.45, 0.38])),
    prim("eye_white_l", 6, pl(0.39, 0.46, 0.06, 0.035, [0.97, 0.97, 0.97]), None),
    prim("eye_white_r", 6, pl(0.61, 0.46, 0.06, 0.035, [0.97, 0.97, 0.97]),
         pl(0.665, 0.46, 0.032, 0.034, [0.97, 0.97, 0.97])),
    prim("iris_l", 7, pl(0.39, 0.46, 0.026, 0.026, [0.30, 0.22, 0.15]), None),
    prim("iris_r", 7, pl(0.61, 0.46, 0.026, 0.026, [0.30, 0.22, 0.15]),
         pl(0.68, 0.46, 0.016, 0.024, [0.30, 0.22, 0.15])),
    prim("brow_l", 8, pl(0.39, 0.38, 0.065, 0.02, HAIR), None, kind="rect"),
    prim("brow_r", 8, pl(0.61, 0.38, 0.065, 0.02, HAIR), pl(0.66, 0.38, 0.04, 0.02, HAIR), kind="rect"),
    prim("nose", 8, pl(0.5, 0.555, 0.032, 0.06, [0.74, 0.54, 0.44]),
         pl(0.695, 0.555, 0.05, 0.06, [0.80, 0.62, 0.50], kind="tri")),
    prim("mouth", 8, pl(0.5, 0.68, 0.075, 0.02, [0.72, 0.32, 0.32]),
         pl(0.67, 0.68, 0.032, 0.018, [0.72, 0.32, 0.32])),
]


def t(primitive, prop, front, side):
    return {"primitive": primitive, "property": prop, "front": front, "side": side}


def tg(glyph, prop, front, side):
    return {"glyph": glyph, "property": prop, "front": front, "side": side}


SKIN_PARTS = ["ear_l", "ear_r", "cranium", "jaw"]

CONTROLS = {
    "head_width": [t("cranium", "rx", 0.09, 0.07), t("ear_l", "cx", -0.09, 0.0), t("ear_r", "cx", 0.09, -0.05),
                   t("ear_canal", "cx", 0.0, -0.05)],
    "head_height": [t("cranium", "ry", 0.09, 0.09), t("cranium", "cy", -0.04, -0.04)],
    "jaw_width": [t("jaw", "rx", 0.12, 0.08), t("jaw", "ry", 0.05, 0.05)],
    "skin_r": [t(p, "r", 0.3, 0.3) for p in SKIN_PARTS] + [t("nose", "r", 0.25, 0.25)],
    "skin_g": [t(p, "g", 0.3, 0.3) for p in SKIN_PARTS] + [t("nose", "g", 0.25, 0.25)],
    "skin_b": [t(p, "b", 0.3, 0.3) for p in SKIN_PARTS] + [t("nose", "b", 0.25, 0.25)],
    "eye_size": [t(e, "rx", 0.05, 0.04) for e in ["eye_white_l", "eye_white_r"]]
                + [t(e, "ry", 0.04, 0.04) for e in ["eye_white_l", "eye_white_r"]]
                + [t(e, "rx", 0.025, 0.02) for e in ["iris_l", "iris_r"]]
                + [t(e, "ry", 0.025, 0.025) for e in ["iris_l", "iris_r"]],
    "eye_spacing": [t("eye_white_l", "cx", -0.08, 0.0), t("eye_white_r", "cx", 0.08, 0.06),
                    t("iris_l", "cx", -0.08, 0.0), t("iris_r", "cx", 0.08, 0.06)],
    "eye_height": [t(e, "cy", 0.07, 0.07) for e in ["eye_white_l", "eye_white_r", "iris_l", "iris_r"]],
    "iris_shade": [t("iris_l", "luma", -0.4, 0.0), t("iris_r", "luma", -0.4, -0.4),
                   t("iris_l", "b", 0.3, 0.0), t("iris_r", "b", 0.3, 0.3)],
    "brow_height": [t(b, "cy", 0.07, 0.07) for b in ["brow_l", "brow_r"]],
    "brow_thickness": [t(b, "ry", 0.04, 0.04) for b in ["brow_l", "brow_r"]],
    "brow_length": [t("brow_l", "rx", 0.06, 0.0), t("brow_r", "rx", 0.06, 0.05)],
    "brow_tilt": [t("brow_l", "rot", 0.9, 0.0), t("brow_r", "rot", -0.9, -0.9)],
    "hair_shade": [t(b, "luma", 0.45, 0.45) for b in ["brow_l", "brow_r"]]
                  + [tg(g, "luma", 0.45, 0.45) for g in ["hair_style", "mustache", "beard"]],
    "nose_length": [t("nose", "ry", 0.05, 0.05)],
    "nose_width": [t("nose", "rx", 0.04, 0.07)],
    "nose_height": [t("nose", "cy", 0.06, 0.06)],
    "mouth_width": [t("mouth", "rx", 0.07, 0.04)],
    "mouth_thickness": [t("mouth", "ry", 0.03, 0.03)],
    "mouth_height": [t("mouth", "cy", 0.07, 0.07)],
    "lip_red": [t("mouth", "r", 0.45, 0.45), t("mouth", "g", -0.15, -0.15)],
    "ear_size": [t(e, "rx", 0.05, 0.05) for e in ["ear_l", "ear_r"]]
                + [t(e, "ry", 0.07, 0.07) for e in ["ear_l", "ear_r"]],
    "ear_height": [t(e, "cy", 0.08, 0.08) for e in ["ear_l", "ear_r", "ear_canal"]],
}


def s(u, v, ru, rv, kind="ellipse", **kw):
    d = {"kind": kind, "u": u, "v": v, "ru": ru, "rv": rv}
    d.update(kw)
    return d


def variant(color, front, side):
    return {"color": color, "front": front, "side": side}


GLYPHS = [
    {"slot": "blush", "layer": 3, "anchor": "cranium", "variants": [
        variant([0.95, 0.45, 0.5], [s(-0.58, 0.45, 0.2, 0.12, alpha=0.55), s(0.58, 0.45, 0.2, 0.12, alpha=0.55)],
                [s(0.62, 0.45, 0.18, 0.12, alpha=0.55)]),
        variant([0.85, 0.25, 0.3], [s(-0.55, 0.5, 0.3, 0.16, alpha=0.6), s(0.55, 0.5, 0.3, 0.16, alpha=0.6)],
                [s(0.6, 0.5, 0.26, 0.16, alpha=0.6)]),
    ]},
    {"slot": "beard", "layer": 4, "anchor": "jaw", "variants": [
        variant([0.22, 0.15, 0.1], [s(0.0, 0.85, 0.3, 0.22)], [s(0.55, 0.82, 0.25, 0.22)]),
        variant([0.22, 0.15, 0.1], [s(0.0, 0.62, 1.02, 0.45)], [s(0.2, 0.62, 0.85, 0.45)]),
        variant([0.22, 0.15, 0.1], [s(0.0, 0.75, 0.9, 0.35, kind="ring", thickness=0.3)],
                [s(0.0, 0.7, 0.85, 0.35, kind="ring", thickness=0.3)]),
    ]},
    {"slot": "eye_makeup", "layer": 5, "anchor": "cranium", "variants": [
        variant([0.55, 0.3, 0.65], [s(-0.44, -0.03, 0.36, 0.15, alpha=0.6), s(0.44, -0.03, 0.36, 0.15, alpha=0.6)],
                [s(0.76, -0.02, 0.16, 0.13, alpha=0.6)]),
        variant([0.1, 0.25, 0.6], [s(-0.44, 0.18, 0.34, 0.03, kind="rect"), s(0.44, 0.18, 0.34, 0.03, kind="rect")],
                [s(0.76, 0.17, 0.16, 0.03, kind="rect")]),
    ]},
    {"slot": "scar", "layer": 9, "anchor": "cranium", "variants": [
        variant([0.55, 0.2, 0.2], [s(0.55, 0.3, 0.18, 0.025, kind="rect", rot=0.8)],
                [s(0.55, 0.3, 0.18, 0.025, kind="rect", rot=0.8)]),
        variant([0.55, 0.2, 0.2], [s(-0.3, -0.3, 0.2, 0.025, kind="rect", rot=-0.5)],
                [s(0.35, -0.3, 0.2, 0.025, kind="rect", rot=-0.5)]),
    ]},
    {"slot": "mustache", "layer": 10, "anchor": "mouth", "variants": [
        variant(HAIR, [s(0.0, -2.0, 1.15, 0.9, kind="rect")], [s(-0.4, -2.0, 1.2, 0.9, kind="rect")]),
        variant(HAIR, [s(-0.6, -1.8, 0.7, 1.0, rot=0.35), s(0.6, -1.8, 0.7, 1.0, rot=-0.35)],
                [s(-0.3, -1.8, 1.1, 1.0, rot=-0.3)]),
        variant(HAIR, [s(0.0, -1.7, 1.0, 0.45, kind="rect")], [s(-0.4, -1.7, 1.0, 0.45, kind="rect")]),
    ]},
    {"slot": "glasses", "layer": 11, "anchor": "cranium", "variants": [
        variant([0.08, 0.08, 0.08],
                [s(-0.44, 0.1, 0.3, 0.19, kind="ring", thickness=0.22),
                 s(0.44, 0.1, 0.3, 0.19, kind="ring", thickness=0.22),
                 s(0.0, 0.08, 0.16, 0.015, kind="rect")],
                [s(0.76, 0.1, 0.16, 0.19, kind="ring", thickness=0.22), s(0.3, 0.06, 0.32, 0.015, kind="rect")]),
        variant([0.05, 0.05, 0.12],
                [s(-0.44, 0.1, 0.3, 0.17, alpha=0.7), s(0.44, 0.1, 0.3, 0.17, alpha=0.7),
                 s(0.0, 0.06, 0.16, 0.02, kind="rect")],
                [s(0.76, 0.1, 0.15, 0.17, alpha=0.7), s(0.3, 0.05, 0.32, 0.02, kind="rect")]),
    ]},
    {"slot": "hair_style", "layer": 12, "anchor": "cranium", "variants": [
        variant(HAIR, [s(0.0, -0.8, 1.08, 0.45)], [s(-0.1, -0.78, 1.06, 0.45)]),
        variant(HAIR, [s(0.0, -0.8, 1.08, 0.45), s(-1.0, -0.25, 0.14, 0.5, kind="rect"),
                       s(1.0, -0.25, 0.14, 0.5, kind="rect")],
                [s(-0.1, -0.78, 1.06, 0.45), s(-0.72, -0.1, 0.32, 0.6, kind="rect")]),
        variant(HAIR, [s(0.0, -0.85, 1.0, 0.35), s(-0.5, -1.35, 0.22, 0.3, kind="tri"),
                       s(0.0, -1.4, 0.22, 0.35, kind="tri"), s(0.45, -1.35, 0.22, 0.3, kind="tri")],
                [s(-0.1, -0.85, 1.0, 0.35), s(-0.4, -1.35, 0.22, 0.3, kind="tri"),
                 s(0.1, -1.4, 0.22, 0.35, kind="tri")]),
        variant(HAIR, [s(0.0, -0.82, 1.06, 0.42), s(0.0, -1.2, 0.34, 0.28)],
                [s(-0.1, -0.8, 1.05, 0.42), s(-0.75, -0.9, 0.3, 0.28)]),
    ]},
    {"slot": "earring", "layer": 13, "anchor": "ear_r", "variants": [
        variant([0.95, 0.8, 0.2], [s(0.0, 1.2, 0.45, 0.3, kind="ring", thickness=0.45),
                                   s(0.0, 1.2, 0.45, 0.3, kind="ring", thickness=0.45, anchor="ear_l")],
                [s(0.0, 1.2, 0.45, 0.3, kind="ring", thickness=0.45)]),
        variant([0.3, 0.8, 0.9], [s(0.0, 1.05, 0.35, 0.22), s(0.0, 1.05, 0.35, 0.22, anchor="ear_l")],
                [s(0.0, 1.05, 0.35, 0.22)]),
    ]},
]


def write(name, schema_id, controls, glyphs):
    doc = {
        "version": 1,
        "schema_id": schema_id,
        "background": [0.80, 0.85, 0.92],
        "primitives": PRIMITIVES,
        "controls": [{"controller": c, "targets": targets} for c, targets in controls.items()],
        "glyphs": glyphs,
    }
    (OUT / name).write_text(json.dumps(doc, indent=1) + "\n")


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    write("mini.layout.json", "mini", CONTROLS, GLYPHS)
    toy_controls = {c: [x for x in CONTROLS[c] if "glyph" not in x]
                    for c in ["head_width", "skin_r", "eye_size", "mouth_width"]}
    toy_glyphs = []
    for g in GLYPHS:
        if g["slot"] in ("hair_style", "beard"):
            g = dict(g)
            g["variants"] = g["variants"][:2]
            toy_glyphs.append(g)
    write("toy.layout.json", "toy", toy_controls, toy_glyphs)


if __name__ == "__main__":
    main()
