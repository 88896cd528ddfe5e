#pragma once

// Procedural face engine: layered 2D rasterization of FacialParams into a
// front view and a profile view, driven entirely by a layout file.
//
// Layout semantics
//   * primitives: named shapes with a base placement per view ("front",
//     "side"; a null view means the primitive is not drawn there).
//   * controls: one entry per continuous controller. Each target adds
//     gain * (value - 0.5) to one property of a primitive or glyph.
//   * glyphs: one entry per discrete slot. Variant v (v >= 1) is a list of
//     shapes per view, expressed in the unit frame of an anchor primitive;
//     slot value 0 draws nothing.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "image.hpp"
#include "param_schema.hpp"

namespace t2p {

enum class View { front = 0, side = 1 };

inline const char* view_name(View v) { return v == View::front ? "front" : "side"; }

enum class ShapeKind { ellipse, ring, rect, tri };

inline ShapeKind parse_shape_kind(const std::string& s) {
    if (s == "ellipse") return ShapeKind::ellipse;
    if (s == "ring") return ShapeKind::ring;
    if (s == "rect") return ShapeKind::rect;
    if (s == "tri") return ShapeKind::tri;
    throw ParseError("layout: unknown shape kind '" + s + "'");
}

/// Properties a control target may drive.
enum class Property { cx, cy, rx, ry, rot, r, g, b, luma };

inline Property parse_property(const std::string& s) {
    static const std::map<std::string, Property> names = {
        {"cx", Property::cx}, {"cy", Property::cy}, {"rx", Property::rx}, {"ry", Property::ry}, {"rot", Property::rot},
        {"r", Property::r},   {"g", Property::g},   {"b", Property::b},   {"luma", Property::luma}};
    const auto it = names.find(s);
    if (it == names.end()) throw ParseError("layout: unknown property '" + s + "'");
    return it->second;
}

struct Placement {
    ShapeKind kind = ShapeKind::ellipse;
    double cx = 0.5, cy = 0.5, rx = 0.1, ry = 0.1, rot = 0.0, thickness = 0.2, alpha = 1.0;
    std::array<double, 3> color{0.5, 0.5, 0.5};
};

struct Primitive {
    std::string name;
    int layer = 0;
    std::array<std::optional<Placement>, 2> views;  // indexed by View
};

/// A glyph shape in anchor-relative coordinates.
struct GlyphShape {
    ShapeKind kind = ShapeKind::ellipse;
    std::size_t anchor = 0;  // primitive index
    double u = 0, v = 0, ru = 1, rv = 1, rot = 0, thickness = 0.2, alpha = 1.0;
    std::optional<std::array<double, 3>> color;  // defaults to the variant color
};

struct GlyphVariant {
    std::array<double, 3> color{0.2, 0.2, 0.2};
    std::array<std::vector<GlyphShape>, 2> views;
};

struct Glyph {
    std::size_t slot = 0;
    int layer = 0;
    std::vector<GlyphVariant> variants;  // variants[v - 1] drawn for slot value v
};

struct ControlTarget {
    bool is_glyph = false;
    std::size_t index = 0;  // primitive or glyph index
    Property property = Property::cx;
    std::array<double, 2> gain{0.0, 0.0};  // per view
};

struct EngineLayout {
    int version = 1;
    std::string schema_id;
    std::size_t continuous_count = 0;
    std::size_t discrete_count = 0;
    std::array<double, 3> background{0.8, 0.85, 0.9};
    std::vector<Primitive> primitives;
    std::vector<Glyph> glyphs;
    std::vector<std::vector<ControlTarget>> controls;  // indexed by controller
    std::vector<std::size_t> glyph_of_slot;            // slot -> glyph index
};

namespace detail {

inline std::array<double, 3> parse_color(const nlohmann::json& j) {
    if (!j.is_array() || j.size() != 3) throw ParseError("layout: color must be [r,g,b]");
    return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

inline Placement parse_placement(const nlohmann::json& j, ShapeKind default_kind) {
    Placement p;
    p.kind = j.contains("kind") ? parse_shape_kind(j["kind"].get<std::string>()) : default_kind;
    p.cx = j.at("cx").get<double>();
    p.cy = j.at("cy").get<double>();
    p.rx = j.at("rx").get<double>();
    p.ry = j.at("ry").get<double>();
    p.rot = j.value("rot", 0.0);
    p.thickness = j.value("thickness", 0.2);
    p.alpha = j.value("alpha", 1.0);
    p.color = parse_color(j.at("color"));
    return p;
}

}  // namespace detail

inline EngineLayout parse_layout(std::string_view text, const ParamSchema& schema) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("layout: ") + e.what());
    }
    EngineLayout layout;
    try {
        layout.version = doc.at("version").get<int>();
        if (layout.version != 1) throw ParseError("layout: unsupported version " + std::to_string(layout.version));
        layout.schema_id = doc.at("schema_id").get<std::string>();
        if (layout.schema_id != schema.id)
            throw ValidationError("layout: schema_id '" + layout.schema_id + "' does not match schema '" + schema.id +
                                  "'");
        layout.continuous_count = schema.continuous.size();
        layout.discrete_count = schema.discrete.size();
        if (doc.contains("background")) layout.background = detail::parse_color(doc["background"]);

        std::map<std::string, std::size_t> prim_index;
        for (const auto& pj : doc.at("primitives")) {
            Primitive prim;
            prim.name = pj.at("name").get<std::string>();
            prim.layer = pj.value("layer", 0);
            const ShapeKind kind = parse_shape_kind(pj.value("kind", std::string("ellipse")));
            for (View v : {View::front, View::side}) {
                const char* key = view_name(v);
                if (pj.contains(key) && !pj[key].is_null())
                    prim.views[static_cast<int>(v)] = detail::parse_placement(pj[key], kind);
            }
            if (!prim_index.emplace(prim.name, layout.primitives.size()).second)
                throw ValidationError("layout: duplicate primitive '" + prim.name + "'");
            layout.primitives.push_back(std::move(prim));
        }

        std::map<std::string, std::size_t> glyph_index;
        layout.glyph_of_slot.assign(schema.discrete.size(), SIZE_MAX);
        for (const auto& gj : doc.at("glyphs")) {
            Glyph glyph;
            const std::string slot_name = gj.at("slot").get<std::string>();
            const auto slot = schema.slot_index(slot_name);
            if (!slot) throw ValidationError("layout: glyph for unknown slot '" + slot_name + "'");
            if (layout.glyph_of_slot[*slot] != SIZE_MAX)
                throw ValidationError("layout: slot '" + slot_name + "' has more than one glyph entry");
            glyph.slot = *slot;
            glyph.layer = gj.value("layer", 0);
            const std::string default_anchor = gj.at("anchor").get<std::string>();
            for (const auto& vj : gj.at("variants")) {
                GlyphVariant variant;
                variant.color = detail::parse_color(vj.at("color"));
                for (View v : {View::front, View::side}) {
                    const char* key = view_name(v);
                    if (!vj.contains(key)) continue;
                    for (const auto& sj : vj[key]) {
                        GlyphShape s;
                        s.kind = parse_shape_kind(sj.value("kind", std::string("ellipse")));
                        const std::string anchor = sj.value("anchor", default_anchor);
                        const auto it = prim_index.find(anchor);
                        if (it == prim_index.end())
                            throw ValidationError("layout: glyph '" + slot_name + "' anchors to unknown primitive '" +
                                                  anchor + "'");
                        if (!layout.primitives[it->second].views[static_cast<int>(v)])
                            throw ValidationError("layout: glyph '" + slot_name + "' anchors to '" + anchor +
                                                  "', which is not drawn in the " + key + " view");
                        s.anchor = it->second;
                        s.u = sj.at("u").get<double>();
                        s.v = sj.at("v").get<double>();
                        s.ru = sj.at("ru").get<double>();
                        s.rv = sj.at("rv").get<double>();
                        s.rot = sj.value("rot", 0.0);
                        s.thickness = sj.value("thickness", 0.2);
                        s.alpha = sj.value("alpha", 1.0);
                        if (sj.contains("color")) s.color = detail::parse_color(sj["color"]);
                        variant.views[static_cast<int>(v)].push_back(s);
                    }
                }
                glyph.variants.push_back(std::move(variant));
            }
            const int expected = schema.discrete[*slot].cardinality - 1;
            if (static_cast<int>(glyph.variants.size()) != expected)
                throw ValidationError("layout: slot '" + slot_name + "' needs " + std::to_string(expected) +
                                      " variants, layout has " + std::to_string(glyph.variants.size()));
            glyph_index.emplace(slot_name, layout.glyphs.size());
            layout.glyph_of_slot[*slot] = layout.glyphs.size();
            layout.glyphs.push_back(std::move(glyph));
        }
        for (std::size_t i = 0; i < schema.discrete.size(); ++i)
            if (layout.glyph_of_slot[i] == SIZE_MAX)
                throw ValidationError("layout: slot '" + schema.discrete[i].name + "' has no glyph entry");

        layout.controls.assign(schema.continuous.size(), {});
        std::vector<bool> seen(schema.continuous.size(), false);
        for (const auto& cj : doc.at("controls")) {
            const std::string name = cj.at("controller").get<std::string>();
            const auto ci = schema.controller_index(name);
            if (!ci) throw ValidationError("layout: control for unknown controller '" + name + "'");
            if (seen[*ci]) throw ValidationError("layout: controller '" + name + "' has more than one control entry");
            seen[*ci] = true;
            for (const auto& tj : cj.at("targets")) {
                ControlTarget t;
                if (tj.contains("glyph")) {
                    const std::string g = tj["glyph"].get<std::string>();
                    const auto it = glyph_index.find(g);
                    if (it == glyph_index.end())
                        throw ValidationError("layout: control '" + name + "' targets unknown glyph '" + g + "'");
                    t.is_glyph = true;
                    t.index = it->second;
                } else {
                    const std::string p = tj.at("primitive").get<std::string>();
                    const auto it = prim_index.find(p);
                    if (it == prim_index.end())
                        throw ValidationError("layout: control '" + name + "' targets unknown primitive '" + p + "'");
                    t.index = it->second;
                }
                t.property = parse_property(tj.at("property").get<std::string>());
                if (t.is_glyph && t.property != Property::r && t.property != Property::g &&
                    t.property != Property::b && t.property != Property::luma)
                    throw ValidationError("layout: glyph targets may only drive colors (control '" + name + "')");
                t.gain = {tj.value("front", 0.0), tj.value("side", 0.0)};
                layout.controls[*ci].push_back(t);
            }
            if (layout.controls[*ci].empty())
                throw ValidationError("layout: controller '" + name + "' has no targets");
        }
        for (std::size_t i = 0; i < schema.continuous.size(); ++i)
            if (!seen[i])
                throw ValidationError("layout: controller '" + schema.continuous[i].name + "' has no control entry");
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("layout: ") + e.what());
    }
    return layout;
}

inline EngineLayout load_layout(const std::filesystem::path& path, const ParamSchema& schema) {
    const std::string text = read_text_file(path);
    try {
        return parse_layout(text, schema);
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what());
    } catch (const ValidationError& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
}

namespace detail {

struct DrawShape {
    ShapeKind kind;
    double cx, cy, rx, ry, rot, thickness, alpha;
    std::array<double, 3> color;
};

inline double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

inline void apply_property(Placement& p, Property prop, double delta) {
    switch (prop) {
        case Property::cx: p.cx += delta; break;
        case Property::cy: p.cy += delta; break;
        case Property::rx: p.rx += delta; break;
        case Property::ry: p.ry += delta; break;
        case Property::rot: p.rot += delta; break;
        case Property::r: p.color[0] += delta; break;
        case Property::g: p.color[1] += delta; break;
        case Property::b: p.color[2] += delta; break;
        case Property::luma:
            for (double& c : p.color) c += delta;
            break;
    }
}

inline void apply_tint(std::array<double, 3>& tint, Property prop, double delta) {
    switch (prop) {
        case Property::r: tint[0] += delta; break;
        case Property::g: tint[1] += delta; break;
        case Property::b: tint[2] += delta; break;
        case Property::luma:
            for (double& c : tint) c += delta;
            break;
        default: break;
    }
}

constexpr double kMinRadius = 0.002;
// Glyphs scale with their anchor but keep a visible size when it collapses.
constexpr double kMinGlyphFrame = 0.02;

inline bool inside(const DrawShape& s, double x, double y) {
    const double dx = x - s.cx;
    const double dy = y - s.cy;
    const double c = std::cos(s.rot), sn = std::sin(s.rot);
    const double lx = (c * dx + sn * dy) / s.rx;
    const double ly = (-sn * dx + c * dy) / s.ry;
    switch (s.kind) {
        case ShapeKind::ellipse: return lx * lx + ly * ly <= 1.0;
        case ShapeKind::ring: {
            const double r2 = lx * lx + ly * ly;
            const double inner = 1.0 - s.thickness;
            return r2 <= 1.0 && r2 >= inner * inner;
        }
        case ShapeKind::rect: return std::abs(lx) <= 1.0 && std::abs(ly) <= 1.0;
        case ShapeKind::tri:
            // Right triangle with vertices (0,-1), (1,1), (0,1) in the local frame.
            return lx >= 0.0 && ly <= 1.0 && ly >= 2.0 * lx - 1.0;
    }
    return false;
}

}  // namespace detail

inline void check_params_for_layout(const EngineLayout& layout, const FacialParams& params) {
    if (params.schema_id != layout.schema_id)
        throw ValidationError("engine: params schema '" + params.schema_id + "' does not match layout schema '" +
                              layout.schema_id + "'");
    if (params.continuous.size() != layout.continuous_count || params.discrete.size() != layout.discrete_count)
        throw ValidationError("engine: params arity does not match layout");
    for (std::size_t i = 0; i < params.discrete.size(); ++i) {
        const int v = params.discrete[i];
        const auto& g = layout.glyphs[layout.glyph_of_slot[i]];
        if (v < 0 || v > static_cast<int>(g.variants.size()))
            throw ValidationError("engine: discrete[" + std::to_string(i) + "] = " + std::to_string(v) +
                                  " out of range");
    }
}

/// Deterministic render of one view. Each pixel averages a fixed 2x2 grid of
/// samples; shapes are painted in (layer, declaration) order.
inline RasterImage render(const FacialParams& params, const EngineLayout& layout, View view, int resolution = 64) {
    check_params_for_layout(layout, params);
    if (resolution < 2 || (resolution & (resolution - 1)) != 0)
        throw ValidationError("engine: resolution must be a power of two, got " + std::to_string(resolution));
    const int vi = static_cast<int>(view);

    std::vector<std::optional<Placement>> placed(layout.primitives.size());
    for (std::size_t i = 0; i < layout.primitives.size(); ++i) placed[i] = layout.primitives[i].views[vi];
    std::vector<std::array<double, 3>> tint(layout.glyphs.size(), {0.0, 0.0, 0.0});

    for (std::size_t c = 0; c < layout.controls.size(); ++c) {
        const double offset = std::clamp(params.continuous[c], 0.0, 1.0) - 0.5;
        for (const auto& t : layout.controls[c]) {
            const double delta = t.gain[vi] * offset;
            if (t.is_glyph) {
                detail::apply_tint(tint[t.index], t.property, delta);
            } else if (placed[t.index]) {
                detail::apply_property(*placed[t.index], t.property, delta);
            }
        }
    }
    for (auto& p : placed) {
        if (!p) continue;
        p->rx = std::max(p->rx, detail::kMinRadius);
        p->ry = std::max(p->ry, detail::kMinRadius);
        for (double& ch : p->color) ch = detail::clamp01(ch);
    }

    struct Item {
        int layer;
        std::size_t order;
        detail::DrawShape shape;
    };
    std::vector<Item> items;
    std::size_t order = 0;
    for (std::size_t i = 0; i < layout.primitives.size(); ++i) {
        if (!placed[i]) continue;
        const Placement& p = *placed[i];
        items.push_back({layout.primitives[i].layer, order++,
                         {p.kind, p.cx, p.cy, p.rx, p.ry, p.rot, p.thickness, p.alpha, p.color}});
    }
    for (std::size_t gi = 0; gi < layout.glyphs.size(); ++gi) {
        const Glyph& g = layout.glyphs[gi];
        const int value = params.discrete[g.slot];
        if (value == 0) continue;
        const GlyphVariant& variant = g.variants[static_cast<std::size_t>(value - 1)];
        for (const GlyphShape& s : variant.views[vi]) {
            const Placement& a = *placed[s.anchor];
            const double c = std::cos(a.rot), sn = std::sin(a.rot);
            const double fx = std::max(a.rx, detail::kMinGlyphFrame), fy = std::max(a.ry, detail::kMinGlyphFrame);
            const double ox = s.u * fx, oy = s.v * fy;
            std::array<double, 3> color = s.color.value_or(variant.color);
            for (int ch = 0; ch < 3; ++ch) color[ch] = detail::clamp01(color[ch] + tint[gi][ch]);
            items.push_back({g.layer, order++,
                             {s.kind, a.cx + c * ox - sn * oy, a.cy + sn * ox + c * oy,
                              std::max(s.ru * fx, detail::kMinRadius), std::max(s.rv * fy, detail::kMinRadius),
                              a.rot + s.rot, s.thickness, s.alpha, color}});
        }
    }
    std::stable_sort(items.begin(), items.end(), [](const Item& l, const Item& r) {
        return l.layer != r.layer ? l.layer < r.layer : l.order < r.order;
    });

    const int ss = 2;
    const int n = resolution * ss;
    std::vector<double> samples(static_cast<std::size_t>(n) * n * 3);
    for (std::size_t i = 0; i < samples.size(); i += 3) {
        samples[i] = layout.background[0];
        samples[i + 1] = layout.background[1];
        samples[i + 2] = layout.background[2];
    }
    const double step = 1.0 / n;
    for (const Item& item : items) {
        const auto& s = item.shape;
        const double reach = std::hypot(s.rx, s.ry);
        const int x0 = std::max(0, static_cast<int>(std::floor((s.cx - reach) * n)));
        const int x1 = std::min(n - 1, static_cast<int>(std::ceil((s.cx + reach) * n)));
        const int y0 = std::max(0, static_cast<int>(std::floor((s.cy - reach) * n)));
        const int y1 = std::min(n - 1, static_cast<int>(std::ceil((s.cy + reach) * n)));
        for (int y = y0; y <= y1; ++y) {
            const double py = (y + 0.5) * step;
            for (int x = x0; x <= x1; ++x) {
                const double px = (x + 0.5) * step;
                if (!detail::inside(s, px, py)) continue;
                double* dst = &samples[(static_cast<std::size_t>(y) * n + x) * 3];
                for (int ch = 0; ch < 3; ++ch) dst[ch] += s.alpha * (s.color[ch] - dst[ch]);
            }
        }
    }

    RasterImage img(resolution, resolution);
    for (int y = 0; y < resolution; ++y)
        for (int x = 0; x < resolution; ++x)
            for (int ch = 0; ch < 3; ++ch) {
                double acc = 0.0;
                for (int sy = 0; sy < ss; ++sy)
                    for (int sx = 0; sx < ss; ++sx)
                        acc += samples[((static_cast<std::size_t>(y) * ss + sy) * n + (x * ss + sx)) * 3 + ch];
                img.at(y, x, ch) = detail::clamp01(acc / (ss * ss));
            }
    return img;
}

inline RasterImage render_front(const FacialParams& params, const EngineLayout& layout, int resolution = 64) {
    return render(params, layout, View::front, resolution);
}

inline RasterImage render_side(const FacialParams& params, const EngineLayout& layout, int resolution = 64) {
    return render(params, layout, View::side, resolution);
}

}  // namespace t2p
