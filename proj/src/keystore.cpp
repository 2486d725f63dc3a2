#include "ztiam/pki.hpp"

#include <cstdlib>
#include <fstream>
#include <iterator>

namespace ztiam::pki {

using crypto::Bytes;
using crypto::ByteView;

namespace {

constexpr std::string_view kMagic = "ZTKS1\n";
constexpr std::uint32_t kMaxField = 64u << 20;

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 3; i >= 0; --i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::string& in, std::size_t pos) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(in[pos + i]);
    return v;
}

std::string encode_record(const std::string& name, ByteView blob) {
    std::string out;
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(blob.size()));
    out.append(reinterpret_cast<const char*>(blob.data()), blob.size());
    return out;
}

KeystoreError integrity(const std::string& msg) { return KeystoreError(KeystoreError::Code::IntegrityFailure, msg); }

}  // namespace

Bytes master_key_from_env(const char* var) {
    const char* v = std::getenv(var);
    if (v == nullptr || *v == '\0') {
        throw KeystoreError(KeystoreError::Code::MasterKeyMissing, std::string(var) + " is not set");
    }
    Bytes key;
    try {
        key = crypto::base64_decode(v);
    } catch (const std::exception&) {
        throw KeystoreError(KeystoreError::Code::MasterKeyMissing, std::string(var) + " is not valid base64");
    }
    if (key.size() != crypto::kAeadKeySize) {
        throw KeystoreError(KeystoreError::Code::MasterKeyMissing, std::string(var) + " must decode to 32 bytes");
    }
    return key;
}

Keystore::Keystore(Bytes master_key) : key_(std::move(master_key)) {
    if (key_.size() != crypto::kAeadKeySize) {
        throw KeystoreError(KeystoreError::Code::MasterKeyMissing, "master key must be 32 bytes");
    }
}

Keystore::Keystore(const std::filesystem::path& file, Bytes master_key) : Keystore(std::move(master_key)) {
    path_ = file;
    load();
}

void Keystore::load() {
    if (!std::filesystem::exists(*path_)) {
        std::ofstream out(*path_, std::ios::binary | std::ios::trunc);
        out << kMagic;
        if (!out) throw KeystoreError(KeystoreError::Code::SealFailure, "cannot create " + path_->string());
        return;
    }
    std::ifstream in(*path_, std::ios::binary);
    const std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (data.compare(0, kMagic.size(), kMagic) != 0) throw integrity("keystore header mismatch");
    std::size_t pos = kMagic.size();
    while (pos < data.size()) {
        if (data.size() - pos < 4) throw integrity("truncated keystore record");
        const auto name_len = get_u32(data, pos);
        pos += 4;
        if (name_len > kMaxField || data.size() - pos < name_len + 4) throw integrity("truncated keystore record");
        std::string name = data.substr(pos, name_len);
        pos += name_len;
        const auto blob_len = get_u32(data, pos);
        pos += 4;
        if (blob_len > kMaxField || data.size() - pos < blob_len) throw integrity("truncated keystore record");
        if (blob_len == 0) {
            if (sealed_.erase(name)) ++dead_records_;
            ++dead_records_;
        } else {
            if (blob_len < crypto::kAeadOverhead) throw integrity("keystore entry too short: " + name);
            Bytes blob(data.begin() + static_cast<std::ptrdiff_t>(pos),
                       data.begin() + static_cast<std::ptrdiff_t>(pos + blob_len));
            if (sealed_.count(name)) ++dead_records_;
            sealed_[std::move(name)] = std::move(blob);
        }
        pos += blob_len;
    }
}

void Keystore::append_record(const std::string& name, ByteView blob) {
    if (!path_) return;
    std::ofstream out(*path_, std::ios::binary | std::ios::app);
    out << encode_record(name, blob);
    out.flush();
    if (!out) throw KeystoreError(KeystoreError::Code::SealFailure, "cannot write " + path_->string());
}

void Keystore::put(const std::string& name, ByteView secret) {
    if (name.empty()) throw std::invalid_argument("keystore entry name must not be empty");
    Bytes blob;
    try {
        blob = crypto::aead_seal(key_, secret, crypto::as_bytes(name));
    } catch (const crypto::CryptoError& ex) {
        throw KeystoreError(KeystoreError::Code::SealFailure, ex.what());
    }
    std::lock_guard lock(mutex_);
    append_record(name, blob);
    if (sealed_.count(name)) ++dead_records_;
    sealed_[name] = std::move(blob);
    if (path_ && dead_records_ > 64 && dead_records_ > sealed_.size()) compact_locked();
}

Bytes Keystore::get(const std::string& name) const {
    Bytes blob;
    {
        std::lock_guard lock(mutex_);
        const auto it = sealed_.find(name);
        if (it == sealed_.end()) throw KeystoreError(KeystoreError::Code::NotFound, "no keystore entry: " + name);
        blob = it->second;
    }
    try {
        return crypto::aead_open(key_, blob, crypto::as_bytes(name));
    } catch (const crypto::CryptoError&) {
        throw integrity("keystore entry failed authentication: " + name);
    }
}

bool Keystore::contains(const std::string& name) const {
    std::lock_guard lock(mutex_);
    return sealed_.count(name) > 0;
}

void Keystore::remove(const std::string& name) {
    std::lock_guard lock(mutex_);
    if (!sealed_.count(name)) return;
    append_record(name, {});
    sealed_.erase(name);
    dead_records_ += 2;
}

std::vector<std::string> Keystore::names() const {
    std::lock_guard lock(mutex_);
    std::vector<std::string> out;
    for (const auto& [name, _] : sealed_) out.push_back(name);
    return out;
}

void Keystore::compact() {
    std::lock_guard lock(mutex_);
    compact_locked();
}

void Keystore::compact_locked() {
    if (!path_) return;
    const auto tmp = std::filesystem::path(path_->string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out << kMagic;
        for (const auto& [name, blob] : sealed_) out << encode_record(name, blob);
        out.flush();
        if (!out) throw KeystoreError(KeystoreError::Code::SealFailure, "cannot write " + tmp.string());
    }
    std::filesystem::rename(tmp, *path_);
    dead_records_ = 0;
}

}  // namespace ztiam::pki
