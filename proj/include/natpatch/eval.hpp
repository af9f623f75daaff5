#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "natpatch/detector.hpp"
#include "natpatch/patch.hpp"

namespace natpatch {

/// [email protected] style matching: predictions ranked by score, each matched to
/// the ground truth box of the same class with the highest IoU; a hit counts
/// only if that IoU reaches the threshold and the box is still unmatched.
struct MatchProtocol {
    double iou_threshold = 0.5;
};

struct ImagePredictions {
    long long image_id = 0;
    std::vector<Detection> detections;
};

struct ImageGroundTruth {
    long long image_id = 0;
    std::vector<GroundTruthLabel> labels;
};

struct ClassAP {
    int class_id = 0;
    double ap = 0.0;  ///< in [0, 1]
    std::size_t ground_truth = 0;
    std::size_t predictions = 0;
    /// False when the class has neither ground truth nor predictions.
    bool evaluated = false;
};

/// All-point interpolated area under the precision/recall curve, per class.
/// Classes are taken from `classes` if given, otherwise from every class id
/// seen in predictions or ground truth.
std::map<int, ClassAP> average_precision(const std::vector<ImagePredictions>& predictions,
                                         const std::vector<ImageGroundTruth>& ground_truth,
                                         const MatchProtocol& protocol = {},
                                         const std::optional<std::vector<int>>& classes = std::nullopt);

/// Mean of the evaluated per-class APs, in [0, 1].
double mean_average_precision(const std::map<int, ClassAP>& per_class);

struct ProximityClassStats {
    std::size_t near = 0;
    std::size_t suppressed = 0;
    double mean_confidence_delta = 0.0;
};

struct ProximityStats {
    double radius = 0.0;
    std::size_t near = 0;        ///< clean boxes whose centre is within radius of the patch centre
    std::size_t suppressed = 0;  ///< of those, boxes with no same-class match in the attacked list
    double mean_confidence_delta = 0.0;  ///< attacked - clean, 0 for suppressed boxes' attacked side
    std::map<int, ProximityClassStats> per_class;
};

/// Both lists must cover the same images in the same order.
ProximityStats proximity_report(const std::vector<ImagePredictions>& clean,
                                const std::vector<ImagePredictions>& attacked, const Placement& placement,
                                double radius, double match_iou = 0.5);

/// Mean objectness of candidates whose centre lies within `radius` of the
/// placement centre (0 if none).
double mean_objectness_near(const std::vector<Candidate>& candidates, const Placement& placement, double radius);

struct EvalReport {
    std::string name;
    std::vector<std::string> class_names;
    std::vector<int> class_set;
    std::map<int, ClassAP> per_class;
    double map = 0.0;  ///< in [0, 1]
    std::optional<ProximityStats> proximity;
    std::vector<ImagePredictions> detections;

    nlohmann::json to_json() const;
};

EvalReport make_report(std::string name, const std::vector<ImagePredictions>& predictions,
                       const std::vector<ImageGroundTruth>& ground_truth, const std::vector<std::string>& class_names,
                       const std::vector<int>& class_set, const MatchProtocol& protocol = {});

/// Rows "mAP", "AP_<class>" (percent, one decimal); one column per report.
std::string comparison_table_csv(const std::vector<EvalReport>& reports);

/// Fixed colour for a class id (RGB in [0, 1]).
std::array<double, 3> class_colour(int class_id);
/// "<name> <confidence with two decimals>", e.g. "car 0.68".
std::string detection_label(const Detection& d, const std::vector<std::string>& class_names);

/// Draw boxes, labels and an optional patch outline.
Tensor render_annotated(const Tensor& image, const std::vector<Detection>& detections,
                        const std::vector<std::string>& class_names,
                        const std::optional<Placement>& placement = std::nullopt);

}  // namespace natpatch
