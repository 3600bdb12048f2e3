#include "hypergrid/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>

#include "hypergrid/errors.hpp"
#include "hypergrid/transformer.hpp"

namespace hgrid {

namespace {

void put_u64(std::string& out, std::uint64_t v) {
	for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const unsigned char* p) {
	std::uint64_t v = 0;
	for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
	return v;
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> tensors,
                      const nlohmann::json& metadata) {
	nlohmann::json manifest;
	manifest["format"] = "hypergrid-checkpoint";
	manifest["version"] = kCheckpointVersion;
	manifest["metadata"] = metadata;
	manifest["tensors"] = nlohmann::json::array();
	std::string payload;
	for (const auto& t : tensors) {
		manifest["tensors"].push_back(
		    {{"name", t.name}, {"shape", t.tensor.shape()}, {"offset", payload.size()}, {"count", t.tensor.numel()}});
		for (double v : t.tensor.values()) put_u64(payload, std::bit_cast<std::uint64_t>(v));
	}
	const std::string text = manifest.dump();
	std::string header(kCheckpointMagic, 8);
	put_u64(header, text.size());

	const auto tmp = std::filesystem::path(path).concat(".tmp");
	{
		std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
		if (!out) throw FormatError("cannot write checkpoint " + tmp.string());
		out.write(header.data(), static_cast<std::streamsize>(header.size()));
		out.write(text.data(), static_cast<std::streamsize>(text.size()));
		out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
		if (!out) throw FormatError("short write to checkpoint " + tmp.string());
	}
	std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
	std::ifstream in(path, std::ios::binary);
	if (!in) throw FormatError("cannot open checkpoint " + path.string());
	std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
	if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
		throw FormatError("checkpoint " + path.string() + ": bad magic (not a hypergrid checkpoint)");
	}
	const std::uint64_t mlen = get_u64(bytes.data() + 8);
	if (mlen > bytes.size() - 16) throw FormatError("checkpoint " + path.string() + ": manifest length exceeds file");
	nlohmann::json manifest;
	try {
		manifest = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(mlen));
	} catch (const nlohmann::json::exception& e) {
		throw FormatError("checkpoint " + path.string() + ": corrupt manifest: " + e.what());
	}
	const unsigned char* payload = bytes.data() + 16 + mlen;
	const std::uint64_t payload_size = bytes.size() - 16 - mlen;

	Checkpoint ck;
	try {
		if (manifest.at("format") != "hypergrid-checkpoint") throw FormatError("unexpected format tag");
		if (manifest.at("version").get<int>() != kCheckpointVersion) {
			throw FormatError("unsupported version " + manifest.at("version").dump());
		}
		ck.metadata = manifest.value("metadata", nlohmann::json::object());
		for (const auto& t : manifest.at("tensors")) {
			CheckpointEntry e;
			e.name = t.at("name").get<std::string>();
			e.shape = t.at("shape").get<Shape>();
			const auto offset = t.at("offset").get<std::uint64_t>();
			const auto count = t.at("count").get<std::uint64_t>();
			std::uint64_t expect = 1;
			for (auto d : e.shape) expect *= d;
			if (expect != count) throw FormatError("tensor '" + e.name + "': shape does not match count");
			if (offset % 8 != 0 || offset > payload_size || count > (payload_size - offset) / 8) {
				throw FormatError("tensor '" + e.name + "': payload range out of bounds");
			}
			e.values.resize(count);
			for (std::uint64_t i = 0; i < count; ++i) {
				e.values[i] = std::bit_cast<double>(get_u64(payload + offset + 8 * i));
			}
			ck.tensors.push_back(std::move(e));
		}
	} catch (const nlohmann::json::exception& e) {
		throw FormatError("checkpoint " + path.string() + ": corrupt manifest: " + e.what());
	} catch (const FormatError& e) {
		throw FormatError("checkpoint " + path.string() + ": " + e.what());
	}
	return ck;
}

void save_model(const TransformerModel& model, const std::filesystem::path& path, const nlohmann::json& metadata) {
	write_checkpoint(path, model.parameters(), metadata);
}

void load_model(TransformerModel& model, const Checkpoint& checkpoint) {
	std::map<std::string, const CheckpointEntry*> by_name;
	for (const auto& e : checkpoint.tensors) {
		if (!by_name.emplace(e.name, &e).second) throw FormatError("duplicate tensor '" + e.name + "' in checkpoint");
	}
	for (const auto& p : model.parameters()) {
		auto it = by_name.find(p.name);
		if (it == by_name.end()) throw FormatError("tensor '" + p.name + "' missing from checkpoint");
		if (it->second->shape != p.tensor.shape()) {
			throw FormatError("tensor '" + p.name + "': checkpoint shape " + shape_str(it->second->shape) +
			                  " does not match model shape " + shape_str(p.tensor.shape()));
		}
	}
	if (by_name.size() != model.parameters().size()) {
		for (const auto& e : checkpoint.tensors) {
			bool known = false;
			for (const auto& p : model.parameters()) known = known || p.name == e.name;
			if (!known) throw FormatError("tensor '" + e.name + "' in checkpoint is not a model parameter");
		}
	}
	for (auto p : model.parameters()) {
		const auto& src = by_name.at(p.name)->values;
		auto dst = p.tensor.mutable_values();
		std::copy(src.begin(), src.end(), dst.begin());
	}
}

}  // namespace hgrid
