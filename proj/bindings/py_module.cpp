#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "mnad/memory.hpp"
#include "mnad/optim.hpp"
#include "mnad/scoring.hpp"

namespace py = pybind11;
using namespace mnad;

namespace {

Tensor<double> tensor2d(const py::array_t<double, py::array::c_style | py::array::forcecast>& a,
                        const char* what) {
    if (a.ndim() != 2)
        throw ShapeError(std::string(what) + " must be a 2-d array, got " +
                         std::to_string(a.ndim()) + " dimensions");
    Tensor<double> t(Shape{a.shape(0), a.shape(1)});
    std::copy(a.data(), a.data() + t.size(), t.mutable_ptr());
    return t;
}

py::array_t<double> array2d(const Tensor<double>& t) {
    py::array_t<double> out({t.dim(0), t.dim(1)});
    std::copy(t.ptr(), t.ptr() + t.size(), out.mutable_data());
    return out;
}

memory::MemoryBank<double> bank_of(
    const py::array_t<double, py::array::c_style | py::array::forcecast>& items) {
    memory::MemoryBank<double> bank;
    bank.items = tensor2d(items, "items");
    return bank;
}

} // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "memory-guided normality scoring primitives";
    m.attr("__version__") = "0.1.0";

    m.def(
        "read",
        [](py::array_t<double, py::array::c_style | py::array::forcecast> queries,
           py::array_t<double, py::array::c_style | py::array::forcecast> items) {
            const auto bank = bank_of(items);
            auto rr = memory::read(tensor2d(queries, "queries"), bank);
            return py::make_tuple(array2d(rr.read), array2d(rr.weights));
        },
        py::arg("queries"), py::arg("items"),
        "Soft memory read; returns (read_features, weights), weights rows sum to 1.");

    m.def(
        "update",
        [](py::array_t<double, py::array::c_style | py::array::forcecast> items,
           py::array_t<double, py::array::c_style | py::array::forcecast> queries) {
            auto bank = bank_of(items);
            memory::update(bank, tensor2d(queries, "queries"));
            return array2d(bank.items);
        },
        py::arg("items"), py::arg("queries"),
        "Hard-assignment item update; returns the new unit-norm items.");

    m.def(
        "assign",
        [](py::array_t<double, py::array::c_style | py::array::forcecast> queries,
           py::array_t<double, py::array::c_style | py::array::forcecast> items) {
            const auto bank = bank_of(items);
            const auto asg = memory::assign(tensor2d(queries, "queries"), bank);
            return py::make_tuple(asg.nearest, asg.second);
        },
        py::arg("queries"), py::arg("items"),
        "Nearest and second-nearest item index per query; ties go to the lowest index.");

    m.def(
        "regular_score",
        [](py::array_t<double, py::array::c_style | py::array::forcecast> recon01,
           py::array_t<double, py::array::c_style | py::array::forcecast> target01) {
            return memory::regular_score(tensor2d(recon01, "recon01"),
                                         tensor2d(target01, "target01"));
        },
        py::arg("recon01"), py::arg("target01"),
        "Error-weighted reconstruction error on [0,1] frames; gates test-time updates.");

    m.def(
        "psnr",
        [](py::array_t<double, py::array::c_style | py::array::forcecast> recon01,
           py::array_t<double, py::array::c_style | py::array::forcecast> target01) {
            return scoring::psnr(tensor2d(recon01, "recon01"), tensor2d(target01, "target01"));
        },
        py::arg("recon01"), py::arg("target01"),
        "Peak signal-to-noise ratio with peak 1.0, capped at 100 dB.");

    m.def(
        "distance_score",
        [](py::array_t<double, py::array::c_style | py::array::forcecast> queries,
           py::array_t<double, py::array::c_style | py::array::forcecast> items) {
            const auto bank = bank_of(items);
            return scoring::distance_score(tensor2d(queries, "queries"), bank);
        },
        py::arg("queries"), py::arg("items"),
        "Mean distance from each query to its nearest item.");

    m.def("minmax_normalize", &scoring::minmax_normalize<double>, py::arg("values"),
          "Min-max normalization over one scope; a constant scope maps to zeros.");

    m.def("abnormality_score", &scoring::abnormality_score<double>, py::arg("psnr_seq"),
          py::arg("dist_seq"), py::arg("lam"),
          "Fused per-frame abnormality in [0,1] from psnr and distance sequences.");

    m.def("roc_auc", &scoring::roc_auc<double>, py::arg("scores"), py::arg("labels"),
          "Frame-level ROC AUC; ties count one half.");

    m.def("min_pairwise_distance",
          [](py::array_t<double, py::array::c_style | py::array::forcecast> items) {
              const auto bank = bank_of(items);
              return memory::min_pairwise_distance(bank);
          },
          py::arg("items"), "Smallest pairwise distance between memory items.");

    m.def("cosine_lr", &cosine_lr<double>, py::arg("lr0"), py::arg("step"),
          py::arg("total_steps"), "Cosine-annealed learning rate, lr0 down to 0.");
}
