#pragma once

#include "ztiam/crypto.hpp"

#include <string>

namespace ztiam {

/// Named secrets sealed at rest. Implemented by pki::Keystore.
class SecretStore {
public:
    virtual ~SecretStore() = default;
    virtual void put(const std::string& name, crypto::ByteView secret) = 0;
    /// Throws when the entry is missing or fails authentication.
    virtual crypto::Bytes get(const std::string& name) const = 0;
    virtual bool contains(const std::string& name) const = 0;
};

}  // namespace ztiam
