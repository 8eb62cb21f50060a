#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "core/tensor.h"

namespace ipc {

// Named-tensor archive: a single file holding named float32/byte entries plus
// a free-form JSON metadata object.
//
//   bytes 0..7    magic "NTAR0001"
//   bytes 8..15   u64 little-endian header length H
//   H bytes       JSON header {"meta": {...}, "entries": [...]}
//   payload       raw little-endian data, offsets relative to payload start
struct ntar_writer {
    nlohmann::json meta = nlohmann::json::object();

    void add(const std::string & name, const tensor & t);
    void add_bytes(const std::string & name, const std::vector<uint8_t> & bytes);
    void write(const std::string & path) const;

  private:
    struct entry {
        std::string name;
        std::string dtype;
        std::vector<int64_t> shape;
        std::vector<uint8_t> bytes;
    };
    std::vector<entry> entries_;
};

struct ntar_reader {
    nlohmann::json meta;

    explicit ntar_reader(const std::string & path);

    bool has(const std::string & name) const { return index_.count(name) > 0; }
    std::vector<std::string> names() const;

    tensor get(const std::string & name) const;
    std::vector<uint8_t> get_bytes(const std::string & name) const;
    const std::vector<int64_t> & shape(const std::string & name) const;

  private:
    struct entry {
        std::string dtype;
        std::vector<int64_t> shape;
        uint64_t offset = 0;
        uint64_t nbytes = 0;
    };
    std::map<std::string, entry> index_;
    std::vector<std::string> order_;
    std::vector<uint8_t> payload_;
    const entry & find(const std::string & name) const;
};

} // namespace ipc
