#include <sstream>

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "quietread/app.hpp"
#include "quietread/config.hpp"

namespace py = pybind11;
using namespace quietread;

namespace {

template <typename G>
auto rows_of(const G& g) {
    using V = typename decltype(g.values)::value_type;
    std::vector<std::vector<int>> out(g.rows);
    static_assert(std::is_integral_v<V>);
    for (std::size_t r = 0; r < g.rows; ++r) {
        out[r].assign(g.values.begin() + r * g.cols, g.values.begin() + (r + 1) * g.cols);
    }
    return out;
}

ReadQConfig readq(std::size_t k) {
    ReadQConfig c;
    c.enabled = true;
    c.k = k;
    return c;
}

py::dict task_dict(const McTask& t) {
    py::dict d;
    d["prompt"] = t.prompt;
    d["choices"] = t.choices;
    d["answer_index"] = t.answer_index;
    return d;
}

}  // namespace

PYBIND11_MODULE(_quietread, m) {
    m.doc() = "Native core of quietread";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<IoError>(m, "IoError", PyExc_OSError);
    py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

    m.attr("BOS") = vocab::kBos;
    m.attr("EOS") = vocab::kEos;
    m.attr("PAD") = vocab::kPad;
    m.attr("VOCAB_SIZE") = vocab::kSize;

    m.def("encode", [](const py::bytes& b) { return encode(std::string(b)); }, py::arg("data"));
    m.def("decode", [](const std::vector<std::int32_t>& ids) { return py::bytes(decode(ids)); }, py::arg("ids"));

    m.def(
        "pack",
        [](const std::vector<std::string>& docs, std::size_t seq_len) {
            const auto b = pack_documents(docs, seq_len);
            py::dict d;
            d["tokens"] = rows_of(b.tokens);
            d["targets"] = rows_of(b.targets);
            d["base_mask"] = rows_of(b.base_mask);
            return d;
        },
        py::arg("docs"), py::arg("seq_len"));

    m.def(
        "loss_mask",
        [](const std::vector<std::string>& docs, std::size_t seq_len, std::size_t k) {
            const auto b = pack_documents(docs, seq_len);
            return rows_of(compute_loss_mask(b, readq(k)).mask);
        },
        py::arg("docs"), py::arg("seq_len"), py::arg("k"));

    m.def(
        "mask_stats",
        [](const std::vector<std::string>& docs, std::size_t seq_len, std::size_t k) {
            const auto b = pack_documents(docs, seq_len);
            const auto s = mask_stats(compute_loss_mask(b, readq(k)), b);
            py::dict d;
            d["positions"] = s.positions;
            d["masked_in"] = s.masked_in;
            d["base_masked_in"] = s.base_masked_in;
            d["masked_out_fraction"] = s.masked_out_fraction;
            d["readq_fraction"] = s.readq_fraction;
            d["masked_in_per_row"] = s.masked_in_per_row;
            return d;
        },
        py::arg("docs"), py::arg("seq_len"), py::arg("k"));

    m.def(
        "render_mask",
        [](const std::string& text, std::size_t seq_len, std::size_t k) {
            const auto b = pack_documents({text}, seq_len);
            return app::render_mask(b, compute_loss_mask(b, readq(k)));
        },
        py::arg("text"), py::arg("seq_len"), py::arg("k"));

    m.def(
        "synth_kv",
        [](std::uint64_t seed, std::size_t n_docs, std::size_t n_choices) {
            KvCorpusSpec spec;
            spec.seed = seed;
            spec.n_docs = n_docs;
            spec.n_choices = n_choices;
            const auto c = synth_kv_corpus(spec);
            py::list tasks;
            for (const auto& t : c.tasks) tasks.append(task_dict(t));
            return py::make_tuple(c.docs, tasks);
        },
        py::arg("seed"), py::arg("n_docs"), py::arg("n_choices") = 4);

    m.def(
        "synth_reverse",
        [](std::uint64_t seed, std::size_t n_docs, std::size_t min_len, std::size_t max_len) {
            ReverseCorpusSpec spec;
            spec.seed = seed;
            spec.n_docs = n_docs;
            spec.min_len = min_len;
            spec.max_len = max_len;
            return synth_reverse_corpus(spec);
        },
        py::arg("seed"), py::arg("n_docs"), py::arg("min_len") = 8, py::arg("max_len") = 16);

    m.def(
        "resolved_config",
        [](const std::filesystem::path& path) { return resolved_json(load_run_config(path)).dump(); },
        py::arg("path"), "Resolved run config as a JSON string.");

    m.def(
        "run_cli",
        [](const std::vector<std::string>& args) {
            std::ostringstream out, err;
            int code = 0;
            {
                py::gil_scoped_release release;
                code = app::run(args, out, err);
            }
            return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"), "Runs the quietread CLI in-process; returns (exit_code, stdout, stderr).");
}
