#pragma once

#include "fmalloc/common.hpp"
#include "fmalloc/rng.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

namespace fmalloc {

// Reserved token ids. Dense symbol ids start at 4.
constexpr int kPadId = 0;
constexpr int kBosId = 1;
constexpr int kEosId = 2;
constexpr int kUnkId = 3;

class Vocabulary {
public:
    Vocabulary();

    // Adds symbols in the given order (duplicates ignored).
    void add_symbols(const std::vector<std::string>& symbols);

    int encode_symbol(const std::string& symbol) const;  // UNK fallback
    const std::string& decode_id(int id) const;

    std::vector<int> encode(const std::vector<std::string>& tokens) const;
    std::vector<std::string> decode(const std::vector<int>& ids) const;

    int size() const { return static_cast<int>(id_to_symbol_.size()); }

private:
    std::vector<std::string> id_to_symbol_;
    std::unordered_map<std::string, int> symbol_to_id_;
};

struct SentencePair {
    std::vector<std::string> src;
    std::vector<std::string> tgt;
};

struct Corpus {
    std::vector<SentencePair> train;
    std::vector<SentencePair> dev;
    std::vector<SentencePair> test;
};

enum class Rule { Copy, Reverse, ShiftK, PairSwap, Sort, VocabMap };

Rule rule_from_string(const std::string& name);
std::string rule_to_string(Rule rule);

struct DomainSpec {
    std::string name;
    Rule rule = Rule::Copy;
    int shift_k = 0;                       // ShiftK only
    uint64_t map_seed = 0;                 // VocabMap permutation seed
    std::vector<std::string> vocab_subset; // symbols the domain draws from
    int n_train = 0;
    int n_dev = 100;
    int n_test = 100;
    int len_min = 4;
    int len_max = 12;
    double zipf_s = 0.0;                   // symbol frequency skew; 0 = uniform
    std::string overlap_group;             // domains sharing a group share symbols
};

// Applies the domain's deterministic transduction rule.
std::vector<std::string> apply_rule(const DomainSpec& spec, const std::vector<std::string>& src);

// Deterministic synthetic corpus; train/dev/test have disjoint source sides.
Corpus gen_domain_corpus(const DomainSpec& spec, uint64_t seed);

// Union of symbols over all corpora, lexicographically ordered after the
// reserved tokens; insensitive to corpus order.
Vocabulary build_vocab(const std::vector<const Corpus*>& corpora);

struct EncodedPair {
    std::vector<int> src;     // no BOS/EOS
    std::vector<int> tgt_in;  // BOS + tgt
    std::vector<int> tgt_out; // tgt + EOS
};

std::vector<EncodedPair> encode_corpus(const Vocabulary& vocab, const std::vector<SentencePair>& pairs);

struct PaddedBatch {
    std::vector<EncodedPair> items;              // true-length sequences
    std::vector<std::vector<int>> src_padded;    // rectangular views with PAD
    std::vector<std::vector<int>> tgt_in_padded;
    std::vector<std::vector<int>> tgt_out_padded;
    std::vector<std::vector<uint8_t>> src_mask;  // 1 = real token
    std::vector<std::vector<uint8_t>> tgt_mask;
    size_t size() const { return items.size(); }
};

// Epoch iterator: reshuffles per epoch from a seeded stream.
class BatchIterator {
public:
    BatchIterator(const std::vector<EncodedPair>& data, int batch_size, uint64_t seed);

    void start_epoch(int epoch);      // reshuffles deterministically
    bool next(PaddedBatch& out);      // false at epoch end
    int batches_per_epoch() const;

private:
    const std::vector<EncodedPair>* data_;
    int batch_size_;
    uint64_t seed_;
    std::vector<size_t> order_;
    size_t cursor_ = 0;
};

// Tab-separated "src\ttgt" pairs, one per line. Also accepts two aligned files.
std::vector<SentencePair> load_pairs_tsv(const std::string& path);
std::vector<SentencePair> load_pairs_aligned(const std::string& src_path, const std::string& tgt_path);
void save_pairs_tsv(const std::string& path, const std::vector<SentencePair>& pairs);

std::vector<std::string> split_tokens(const std::string& line);
std::string join_tokens(const std::vector<std::string>& tokens);

// Jaccard overlap between the token sets of two corpora (train sides).
double token_jaccard(const Corpus& a, const Corpus& b);

}  // namespace fmalloc
