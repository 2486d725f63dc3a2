#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ztiam::crypto {

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;

class CryptoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline ByteView as_bytes(std::string_view s) {
    return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}
inline std::string to_string(ByteView b) { return {b.begin(), b.end()}; }

Bytes random_bytes(std::size_t n);
std::string random_token(std::size_t n_bytes);  // hex encoded

std::string hex_encode(ByteView data);

std::string base64_encode(ByteView data);
/// Throws CryptoError on malformed input.
Bytes base64_decode(std::string_view text);

/// RFC 4648 base32, upper case, no padding.
std::string base32_encode(ByteView data);
Bytes base32_decode(std::string_view text);

std::array<std::uint8_t, 20> hmac_sha1(ByteView key, ByteView message);
std::array<std::uint8_t, 32> sha256(ByteView data);

bool constant_time_equal(ByteView a, ByteView b);

struct ScryptParams {
    std::uint64_t n = 1u << 15;
    std::uint64_t r = 8;
    std::uint64_t p = 1;
};
Bytes scrypt(std::string_view password, ByteView salt, const ScryptParams& params, std::size_t out_len);

/// AES-256-GCM. Output layout: 12-byte nonce | ciphertext | 16-byte tag.
Bytes aead_seal(ByteView key, ByteView plaintext, ByteView aad);
/// Throws CryptoError when the tag does not authenticate.
Bytes aead_open(ByteView key, ByteView sealed, ByteView aad);

inline constexpr std::size_t kAeadKeySize = 32;
inline constexpr std::size_t kAeadOverhead = 12 + 16;

}  // namespace ztiam::crypto
