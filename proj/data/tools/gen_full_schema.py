"""Writes data/schemas/full.schema.json: the complete bone-driven face taxonomy
(269 continuous controllers, 62 discrete slots)."""
import json
import pathlib
import re

T = ["translation_x", "translation_y", "translation_z"]
R = ["rotation_x", "rotation_y", "rotation_z"]
S = ["scale_x", "scale_y", "scale_z"]

CONTINUOUS = [
    ("eyebrows", [
        ("eyebrows_inner", T + ["rotation_y", "rotation_z"] + S),
        ("eyebrows_middle", T + ["rotation_y", "rotation_z"] + S),
        ("eyebrows_outer", T + ["rotation_y", "rotation_z"] + S),
        ("outlook", ["shading", "density", "color_r", "color_g", "color_b"]),
    ]),
    ("eyes", [
        ("eyes_whole", T + R + ["scale"]),
        ("upper_eyelids_inner", T + R + S),
        ("upper_eyelids_outer", T + R + S),
        ("lower_eyelids", T + R + S),
        ("inner_corner", T + R + S),
        ("outer_corner", T + R + S),
        ("eyeballs", ["scale", "brightness", "pupil_scale", "color_r", "color_g", "color_b"]),
    ]),
    ("nose", [
        ("nose_whole", ["translation_y", "translation_z", "rotation_x"]),
        ("nose_bridge", ["translation_y", "translation_z", "rotation_x"] + S),
        ("septum", ["translation_y", "translation_z", "rotation_x"] + S),
        ("nostrils", T + R + S),
        ("nose_tip", ["translation_y", "translation_z", "rotation_x"] + S),
        ("base_of_nose", ["translation_y", "translation_z", "rotation_x"] + S),
    ]),
    ("mouth", [
        ("mouth_whole", ["translation_y", "translation_z", "rotation_x"]),
        ("upper_lip_middle", ["translation_y", "translation_z", "rotation_x"] + S),
        ("upper_lip_sides", T + R + S),
        ("lower_lip_middle", ["translation_y", "translation_z", "rotation_x"] + S),
        ("lower_lip_sides", T + R + S),
        ("corners_of_lips", T + R + S),
    ]),
    ("face", [
        ("forehead_middle", ["translation_y", "translation_z", "rotation_x"] + S),
        ("brow_bone", ["translation_y", "translation_z", "rotation_x"] + S),
        ("forehead_sides", T + R + S),
        ("cheekbone", T + ["rotation_x", "scale_x", "scale_z"]),
        ("cheek_upper", T + ["rotation_x", "scale_z"]),
        ("cheek_middle", T + ["rotation_x", "rotation_y", "scale_z"]),
        ("cheek_lower", T + ["rotation_x", "scale_z"]),
        ("philtrum_sides", T + ["rotation_x", "rotation_y", "scale_z"]),
        ("chin_middle", T + ["rotation_x", "rotation_y", "scale_z"]),
        ("chin_sides", T + R + S),
        ("mandible_middle", T + R + S),
        ("mandible_sides", T + R + S),
    ]),
    ("ears", [
        ("ears_whole", T + R + ["scale"]),
        ("auricle", T + ["rotation_x"]),
        ("earlobe", T + ["rotation_x", "scale_x"]),
    ]),
    ("skin", [
        ("skin", ["color_r", "color_g", "color_b", "luster", "aging", "metallic"]),
    ]),
]

RGB = ["color_r", "color_g", "color_b"]
# (subgroup, controllers, cardinality of "type" slots, cardinality of the rest)
DISCRETE = [
    ("eyebrows", [("eyebrows_style", ["type"])]),
    ("eyes", [
        ("eyeball", ["type"]),
        ("eyelids", ["type"]),
        ("eyelashes", ["type", "scale"] + RGB),
        ("eye_makeup", ["type", "eyeliner_shading"] + ["eyeliner_" + c for c in RGB]
         + ["upper_eyeshadow_shading"] + ["upper_eyeshadow_" + c for c in RGB]
         + ["lower_eyeshadow_shading"] + ["lower_eyeshadow_" + c for c in RGB]),
    ]),
    ("lip", [("lip_makeup", ["type", "shading", "luster"] + RGB)]),
    ("face", [
        ("blush", ["type", "translation_x", "translation_y", "scale"] + RGB),
        ("tattoos", ["type", "translation_x", "translation_y", "scale_x", "scale_y", "shading"] + RGB),
        ("scars", ["type", "translation_x", "translation_y", "scale", "shading"]),
        ("beard_upper", ["type", "shading"] + RGB),
        ("beard_lower", ["type", "shading"] + RGB),
    ]),
    ("hair", [("hair_style", ["type"] + RGB)]),
]

TYPE_CARDINALITY = 8
LEVEL_CARDINALITY = 16


def main():
    cont = [{"name": f"{sub}.{c}", "group": g, "subgroup": sub}
            for g, subs in CONTINUOUS for sub, cs in subs for c in cs]
    disc = []
    for g, subs in DISCRETE:
        for sub, cs in subs:
            for c in cs:
                card = TYPE_CARDINALITY if re.match(r"^type$", c) else LEVEL_CARDINALITY
                disc.append({"name": f"{sub}.{c}", "group": g, "cardinality": card})
    assert len(cont) == 269, len(cont)
    assert len(disc) == 62, len(disc)
    out = pathlib.Path(__file__).resolve().parents[1] / "schemas" / "full.schema.json"
    doc = {"id": "full", "continuous": cont, "discrete": disc}
    out.write_text(json.dumps(doc, indent=1) + "\n")


if __name__ == "__main__":
    main()
