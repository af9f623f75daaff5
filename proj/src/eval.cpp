#include "natpatch/eval.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include <opencv2/imgproc.hpp>

#include "natpatch/image_io.hpp"

namespace natpatch {

namespace {

double interpolated_area(const std::vector<double>& recall, const std::vector<double>& precision) {
    std::vector<double> mrec{0.0};
    mrec.insert(mrec.end(), recall.begin(), recall.end());
    mrec.push_back(1.0);
    std::vector<double> mpre{0.0};
    mpre.insert(mpre.end(), precision.begin(), precision.end());
    mpre.push_back(0.0);
    for (std::size_t i = mpre.size() - 1; i > 0; --i) mpre[i - 1] = std::max(mpre[i - 1], mpre[i]);
    double ap = 0.0;
    for (std::size_t i = 1; i < mrec.size(); ++i) {
        if (mrec[i] != mrec[i - 1]) ap += (mrec[i] - mrec[i - 1]) * mpre[i];
    }
    return ap;
}

}  // namespace

std::map<int, ClassAP> average_precision(const std::vector<ImagePredictions>& predictions,
                                         const std::vector<ImageGroundTruth>& ground_truth,
                                         const MatchProtocol& protocol,
                                         const std::optional<std::vector<int>>& classes) {
    std::set<int> class_ids;
    if (classes) {
        class_ids.insert(classes->begin(), classes->end());
    } else {
        for (const auto& p : predictions) for (const auto& d : p.detections) class_ids.insert(d.class_id);
        for (const auto& g : ground_truth) for (const auto& l : g.labels) class_ids.insert(l.class_id);
    }

    std::unordered_map<long long, const ImageGroundTruth*> gt_by_image;
    for (const auto& g : ground_truth) gt_by_image[g.image_id] = &g;

    std::map<int, ClassAP> out;
    for (int cls : class_ids) {
        ClassAP result;
        result.class_id = cls;

        // Ground truth of this class, per image, with matched flags.
        std::unordered_map<long long, std::vector<Box>> gt_boxes;
        for (const auto& g : ground_truth) {
            for (const auto& l : g.labels) {
                if (l.class_id == cls) {
                    gt_boxes[g.image_id].push_back(l.box);
                    ++result.ground_truth;
                }
            }
        }
        struct Scored {
            double score;
            long long image_id;
            Box box;
        };
        std::vector<Scored> preds;
        for (const auto& p : predictions) {
            for (const auto& d : p.detections) {
                if (d.class_id == cls) preds.push_back({d.confidence(), p.image_id, d.box});
            }
        }
        result.predictions = preds.size();
        result.evaluated = result.ground_truth > 0 || result.predictions > 0;
        if (result.ground_truth == 0 || preds.empty()) {
            out[cls] = result;  // AP 0
            continue;
        }
        std::stable_sort(preds.begin(), preds.end(), [](const Scored& a, const Scored& b) { return a.score > b.score; });

        std::unordered_map<long long, std::vector<bool>> matched;
        for (const auto& [id, boxes] : gt_boxes) matched[id].assign(boxes.size(), false);

        std::vector<double> recall, precision;
        std::size_t tp = 0;
        for (std::size_t i = 0; i < preds.size(); ++i) {
            auto it = gt_boxes.find(preds[i].image_id);
            if (it != gt_boxes.end()) {
                double best = -1.0;
                std::size_t best_k = 0;
                for (std::size_t k = 0; k < it->second.size(); ++k) {
                    const double o = iou(preds[i].box, it->second[k]);
                    if (o > best) {
                        best = o;
                        best_k = k;
                    }
                }
                if (best >= protocol.iou_threshold && !matched[preds[i].image_id][best_k]) {
                    matched[preds[i].image_id][best_k] = true;
                    ++tp;
                }
            }
            recall.push_back(static_cast<double>(tp) / static_cast<double>(result.ground_truth));
            precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
        }
        result.ap = interpolated_area(recall, precision);
        out[cls] = result;
    }
    return out;
}

double mean_average_precision(const std::map<int, ClassAP>& per_class) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& [cls, ap] : per_class) {
        if (!ap.evaluated) continue;
        sum += ap.ap;
        ++n;
    }
    return n ? sum / static_cast<double>(n) : 0.0;
}

ProximityStats proximity_report(const std::vector<ImagePredictions>& clean,
                                const std::vector<ImagePredictions>& attacked, const Placement& placement,
                                double radius, double match_iou) {
    if (clean.size() != attacked.size()) {
        throw std::invalid_argument("proximity report needs detections for the same image set");
    }
    ProximityStats stats;
    stats.radius = radius;
    double delta_sum = 0.0;
    std::map<int, double> class_delta;
    const double px = placement.center_x(), py = placement.center_y();
    for (std::size_t i = 0; i < clean.size(); ++i) {
        if (clean[i].image_id != attacked[i].image_id) {
            throw std::invalid_argument("proximity report: image order differs between clean and attacked lists");
        }
        for (const Detection& c : clean[i].detections) {
            if (std::hypot(c.box.center_x() - px, c.box.center_y() - py) > radius) continue;
            const Detection* best = nullptr;
            double best_iou = match_iou;
            for (const Detection& a : attacked[i].detections) {
                if (a.class_id != c.class_id) continue;
                const double o = iou(a.box, c.box);
                if (o >= best_iou) {
                    best_iou = o;
                    best = &a;
                }
            }
            const double delta = (best ? best->confidence() : 0.0) - c.confidence();
            ++stats.near;
            auto& pc = stats.per_class[c.class_id];
            ++pc.near;
            if (!best) {
                ++stats.suppressed;
                ++pc.suppressed;
            }
            delta_sum += delta;
            class_delta[c.class_id] += delta;
        }
    }
    if (stats.near) stats.mean_confidence_delta = delta_sum / static_cast<double>(stats.near);
    for (auto& [cls, pc] : stats.per_class) pc.mean_confidence_delta = class_delta[cls] / static_cast<double>(pc.near);
    return stats;
}

double mean_objectness_near(const std::vector<Candidate>& candidates, const Placement& placement, double radius) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const Candidate& c : candidates) {
        if (std::hypot(c.box.center_x() - placement.center_x(), c.box.center_y() - placement.center_y()) <= radius) {
            sum += c.objectness;
            ++n;
        }
    }
    return n ? sum / static_cast<double>(n) : 0.0;
}

nlohmann::json EvalReport::to_json() const {
    nlohmann::json j;
    j["name"] = name;
    j["class_set"] = nlohmann::json::array();
    for (int c : class_set) {
        j["class_set"].push_back(static_cast<std::size_t>(c) < class_names.size() ? class_names[static_cast<std::size_t>(c)]
                                                                                    : std::to_string(c));
    }
    j["mAP"] = 100.0 * map;
    j["per_class"] = nlohmann::json::object();
    for (const auto& [cls, ap] : per_class) {
        const std::string key =
            static_cast<std::size_t>(cls) < class_names.size() ? class_names[static_cast<std::size_t>(cls)] : std::to_string(cls);
        j["per_class"][key] = {{"AP", 100.0 * ap.ap},
                               {"ground_truth", ap.ground_truth},
                               {"predictions", ap.predictions},
                               {"evaluated", ap.evaluated}};
    }
    if (proximity) {
        nlohmann::json pc = nlohmann::json::object();
        for (const auto& [cls, s] : proximity->per_class) {
            pc[std::to_string(cls)] = {{"near", s.near}, {"suppressed", s.suppressed},
                                       {"mean_confidence_delta", s.mean_confidence_delta}};
        }
        j["proximity"] = {{"radius", proximity->radius},
                          {"near", proximity->near},
                          {"suppressed", proximity->suppressed},
                          {"mean_confidence_delta", proximity->mean_confidence_delta},
                          {"per_class", pc}};
    }
    nlohmann::json dets = nlohmann::json::array();
    for (const auto& p : detections) {
        nlohmann::json boxes = nlohmann::json::array();
        for (const auto& d : p.detections) {
            boxes.push_back({{"class_id", d.class_id},
                             {"bbox", {d.box.x1, d.box.y1, d.box.x2, d.box.y2}},
                             {"objectness", d.objectness},
                             {"class_prob", d.class_prob},
                             {"confidence", d.confidence()}});
        }
        dets.push_back({{"image_id", p.image_id}, {"detections", boxes}});
    }
    j["detections"] = dets;
    return j;
}

EvalReport make_report(std::string name, const std::vector<ImagePredictions>& predictions,
                       const std::vector<ImageGroundTruth>& ground_truth, const std::vector<std::string>& class_names,
                       const std::vector<int>& class_set, const MatchProtocol& protocol) {
    EvalReport r;
    r.name = std::move(name);
    r.class_names = class_names;
    r.class_set = class_set;
    r.per_class = average_precision(predictions, ground_truth, protocol, class_set);
    r.map = mean_average_precision(r.per_class);
    r.detections = predictions;
    return r;
}

std::string comparison_table_csv(const std::vector<EvalReport>& reports) {
    auto fmt = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.1f", 100.0 * v);
        return std::string(buf);
    };
    std::ostringstream os;
    os << "metric";
    for (const auto& r : reports) os << ',' << r.name;
    os << '\n' << "mAP";
    for (const auto& r : reports) os << ',' << fmt(r.map);
    os << '\n';
    if (reports.empty()) return os.str();
    for (int cls : reports.front().class_set) {
        const auto& names = reports.front().class_names;
        os << "AP_" << (static_cast<std::size_t>(cls) < names.size() ? names[static_cast<std::size_t>(cls)] : std::to_string(cls));
        for (const auto& r : reports) {
            auto it = r.per_class.find(cls);
            os << ',' << fmt(it == r.per_class.end() ? 0.0 : it->second.ap);
        }
        os << '\n';
    }
    return os.str();
}

std::array<double, 3> class_colour(int class_id) {
    static constexpr std::array<std::array<double, 3>, 10> palette{{{0.90, 0.10, 0.10},
                                                                    {0.10, 0.70, 0.10},
                                                                    {0.10, 0.30, 0.95},
                                                                    {0.95, 0.75, 0.05},
                                                                    {0.75, 0.10, 0.80},
                                                                    {0.05, 0.75, 0.80},
                                                                    {0.95, 0.45, 0.05},
                                                                    {0.55, 0.30, 0.10},
                                                                    {0.95, 0.40, 0.65},
                                                                    {0.45, 0.45, 0.45}}};
    const auto idx = static_cast<std::size_t>(class_id < 0 ? -class_id : class_id) % palette.size();
    return palette[idx];
}

std::string detection_label(const Detection& d, const std::vector<std::string>& class_names) {
    const auto cls = static_cast<std::size_t>(d.class_id);
    const std::string name = cls < class_names.size() ? class_names[cls] : std::to_string(d.class_id);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", d.confidence());
    return name + " " + buf;
}

Tensor render_annotated(const Tensor& image, const std::vector<Detection>& detections,
                        const std::vector<std::string>& class_names, const std::optional<Placement>& placement) {
    cv::Mat canvas = to_mat(image);
    const auto bgr = [](const std::array<double, 3>& rgb) {
        return cv::Scalar(rgb[2] * 255.0, rgb[1] * 255.0, rgb[0] * 255.0);
    };
    const double scale = std::max(0.3, static_cast<double>(std::min(canvas.rows, canvas.cols)) / 800.0);
    for (const Detection& d : detections) {
        const cv::Scalar colour = bgr(class_colour(d.class_id));
        const cv::Point p1(static_cast<int>(std::lround(d.box.x1)), static_cast<int>(std::lround(d.box.y1)));
        const cv::Point p2(static_cast<int>(std::lround(d.box.x2)) - 1, static_cast<int>(std::lround(d.box.y2)) - 1);
        cv::rectangle(canvas, p1, p2, colour, 1);
        const std::string label = detection_label(d, class_names);
        int baseline = 0;
        const cv::Size ts = cv::getTextSize(label, cv::FONT_HERSHEY_SIMPLEX, scale, 1, &baseline);
        const cv::Point origin(p1.x, std::max(ts.height, p1.y));
        cv::rectangle(canvas, cv::Point(origin.x, origin.y - ts.height), cv::Point(origin.x + ts.width, origin.y + baseline),
                      colour, cv::FILLED);
        cv::putText(canvas, label, origin, cv::FONT_HERSHEY_SIMPLEX, scale, cv::Scalar(255, 255, 255), 1, cv::LINE_AA);
    }
    if (placement) {
        cv::rectangle(canvas, cv::Point(static_cast<int>(placement->x), static_cast<int>(placement->y)),
                      cv::Point(static_cast<int>(placement->x + placement->width) - 1,
                                static_cast<int>(placement->y + placement->height) - 1),
                      cv::Scalar(255, 255, 255), 1);
    }
    return from_mat(canvas);
}

}  // namespace natpatch
