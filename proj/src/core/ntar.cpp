#include "core/ntar.h"

#include <cstring>
#include <fstream>

#include "core/errors.h"

namespace ipc {

static_assert(std::endian::native == std::endian::little, "ntar assumes a little-endian host");

static const char MAGIC[8] = {'N', 'T', 'A', 'R', '0', '0', '0', '1'};

void ntar_writer::add(const std::string & name, const tensor & t) {
    entry e;
    e.name = name;
    e.dtype = "f32";
    e.shape = t.shape;
    e.bytes.resize(t.v.size() * sizeof(float));
    std::memcpy(e.bytes.data(), t.v.data(), e.bytes.size());
    entries_.push_back(std::move(e));
}

void ntar_writer::add_bytes(const std::string & name, const std::vector<uint8_t> & bytes) {
    entry e;
    e.name = name;
    e.dtype = "u8";
    e.shape = {(int64_t) bytes.size()};
    e.bytes = bytes;
    entries_.push_back(std::move(e));
}

void ntar_writer::write(const std::string & path) const {
    nlohmann::json hdr;
    hdr["meta"] = meta;
    auto ents = nlohmann::json::array();
    uint64_t offset = 0;
    for (const auto & e : entries_) {
        nlohmann::json j;
        j["name"] = e.name;
        j["dtype"] = e.dtype;
        j["shape"] = e.shape;
        j["offset"] = offset;
        j["nbytes"] = e.bytes.size();
        ents.push_back(std::move(j));
        offset += e.bytes.size();
    }
    hdr["entries"] = std::move(ents);
    const std::string hs = hdr.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw input_error(strf("ntar: cannot open '%s' for writing", path.c_str()));
    f.write(MAGIC, 8);
    uint64_t hlen = hs.size();
    f.write((const char *) &hlen, 8);
    f.write(hs.data(), (std::streamsize) hs.size());
    for (const auto & e : entries_) {
        f.write((const char *) e.bytes.data(), (std::streamsize) e.bytes.size());
    }
    if (!f) throw input_error(strf("ntar: write to '%s' failed", path.c_str()));
}

ntar_reader::ntar_reader(const std::string & path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw input_error(strf("ntar: cannot open '%s'", path.c_str()));

    char magic[8];
    uint64_t hlen = 0;
    f.read(magic, 8);
    f.read((char *) &hlen, 8);
    if (!f || std::memcmp(magic, MAGIC, 8) != 0) {
        throw integrity_error(strf("ntar: '%s' is not a named-tensor archive", path.c_str()));
    }

    std::string hs(hlen, '\0');
    f.read(hs.data(), (std::streamsize) hlen);
    if (!f) throw integrity_error(strf("ntar: '%s' truncated header", path.c_str()));

    nlohmann::json hdr;
    try {
        hdr = nlohmann::json::parse(hs);
    } catch (const std::exception & ex) {
        throw integrity_error(strf("ntar: '%s' bad header json: %s", path.c_str(), ex.what()));
    }
    meta = hdr.value("meta", nlohmann::json::object());

    payload_.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());

    for (const auto & j : hdr.at("entries")) {
        entry e;
        e.dtype = j.at("dtype").get<std::string>();
        e.shape = j.at("shape").get<std::vector<int64_t>>();
        e.offset = j.at("offset").get<uint64_t>();
        e.nbytes = j.at("nbytes").get<uint64_t>();
        const std::string name = j.at("name").get<std::string>();

        uint64_t elems = 1;
        for (int64_t d : e.shape) elems *= (uint64_t) d;
        const uint64_t want = elems * (e.dtype == "f32" ? 4 : 1);
        if (e.dtype != "f32" && e.dtype != "u8") {
            throw integrity_error(strf("ntar: entry '%s' has unknown dtype '%s'", name.c_str(), e.dtype.c_str()));
        }
        if (want != e.nbytes || e.offset + e.nbytes > payload_.size()) {
            throw integrity_error(strf("ntar: entry '%s' out of bounds or size mismatch", name.c_str()));
        }
        if (!index_.emplace(name, std::move(e)).second) {
            throw integrity_error(strf("ntar: duplicate entry '%s'", name.c_str()));
        }
        order_.push_back(name);
    }
}

std::vector<std::string> ntar_reader::names() const {
    return order_;
}

const ntar_reader::entry & ntar_reader::find(const std::string & name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw integrity_error(strf("ntar: missing entry '%s'", name.c_str()));
    return it->second;
}

tensor ntar_reader::get(const std::string & name) const {
    const entry & e = find(name);
    if (e.dtype != "f32") throw integrity_error(strf("ntar: entry '%s' is not f32", name.c_str()));
    tensor t(e.shape);
    std::memcpy(t.v.data(), payload_.data() + e.offset, e.nbytes);
    return t;
}

std::vector<uint8_t> ntar_reader::get_bytes(const std::string & name) const {
    const entry & e = find(name);
    return std::vector<uint8_t>(payload_.begin() + (ptrdiff_t) e.offset,
                                payload_.begin() + (ptrdiff_t) (e.offset + e.nbytes));
}

const std::vector<int64_t> & ntar_reader::shape(const std::string & name) const {
    return find(name).shape;
}

} // namespace ipc
