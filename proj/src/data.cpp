#include "fmalloc/data.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_set>

namespace fmalloc {

Vocabulary::Vocabulary() {
    id_to_symbol_ = {"<pad>", "<bos>", "<eos>", "<unk>"};
    for (int i = 0; i < 4; ++i) symbol_to_id_[id_to_symbol_[i]] = i;
}

void Vocabulary::add_symbols(const std::vector<std::string>& symbols) {
    for (const auto& s : symbols) {
        if (symbol_to_id_.count(s)) continue;
        symbol_to_id_[s] = static_cast<int>(id_to_symbol_.size());
        id_to_symbol_.push_back(s);
    }
}

int Vocabulary::encode_symbol(const std::string& symbol) const {
    auto it = symbol_to_id_.find(symbol);
    return it == symbol_to_id_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::decode_id(int id) const {
    if (id < 0 || id >= size()) return id_to_symbol_[kUnkId];
    return id_to_symbol_[static_cast<size_t>(id)];
}

std::vector<int> Vocabulary::encode(const std::vector<std::string>& tokens) const {
    std::vector<int> out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) out.push_back(encode_symbol(t));
    return out;
}

std::vector<std::string> Vocabulary::decode(const std::vector<int>& ids) const {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (int id : ids) out.push_back(decode_id(id));
    return out;
}

Rule rule_from_string(const std::string& name) {
    if (name == "copy") return Rule::Copy;
    if (name == "reverse") return Rule::Reverse;
    if (name == "shift_k") return Rule::ShiftK;
    if (name == "pair_swap") return Rule::PairSwap;
    if (name == "sort") return Rule::Sort;
    if (name == "vocab_map") return Rule::VocabMap;
    throw ConfigError("unknown rule: " + name);
}

std::string rule_to_string(Rule rule) {
    switch (rule) {
        case Rule::Copy: return "copy";
        case Rule::Reverse: return "reverse";
        case Rule::ShiftK: return "shift_k";
        case Rule::PairSwap: return "pair_swap";
        case Rule::Sort: return "sort";
        case Rule::VocabMap: return "vocab_map";
    }
    throw ConfigError("bad rule enum");
}

namespace {

// Index of each subset symbol, for shift/map rules.
std::unordered_map<std::string, int> subset_index(const DomainSpec& spec) {
    std::unordered_map<std::string, int> idx;
    for (size_t i = 0; i < spec.vocab_subset.size(); ++i) {
        idx[spec.vocab_subset[i]] = static_cast<int>(i);
    }
    return idx;
}

std::vector<int> map_permutation(const DomainSpec& spec) {
    std::vector<int> perm(spec.vocab_subset.size());
    for (size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
    Rng rng(hash_combine(spec.map_seed, 0x7061726d));
    rng.shuffle(perm);
    return perm;
}

}  // namespace

std::vector<std::string> apply_rule(const DomainSpec& spec, const std::vector<std::string>& src) {
    switch (spec.rule) {
        case Rule::Copy:
            return src;
        case Rule::Reverse: {
            std::vector<std::string> out(src.rbegin(), src.rend());
            return out;
        }
        case Rule::ShiftK: {
            auto idx = subset_index(spec);
            int n = static_cast<int>(spec.vocab_subset.size());
            std::vector<std::string> out;
            out.reserve(src.size());
            for (const auto& tok : src) {
                auto it = idx.find(tok);
                if (it == idx.end()) throw InputError("shift_k: token outside domain vocab: " + tok);
                out.push_back(spec.vocab_subset[static_cast<size_t>((it->second + spec.shift_k) % n)]);
            }
            return out;
        }
        case Rule::PairSwap: {
            std::vector<std::string> out = src;
            for (size_t i = 0; i + 1 < out.size(); i += 2) std::swap(out[i], out[i + 1]);
            return out;
        }
        case Rule::Sort: {
            std::vector<std::string> out = src;
            std::sort(out.begin(), out.end());
            return out;
        }
        case Rule::VocabMap: {
            auto idx = subset_index(spec);
            auto perm = map_permutation(spec);
            std::vector<std::string> out;
            out.reserve(src.size());
            for (const auto& tok : src) {
                auto it = idx.find(tok);
                if (it == idx.end()) throw InputError("vocab_map: token outside domain vocab: " + tok);
                out.push_back(spec.vocab_subset[static_cast<size_t>(perm[static_cast<size_t>(it->second)])]);
            }
            return out;
        }
    }
    throw InputError("bad rule enum");
}

namespace {

// Zipf-ish symbol sampling; s = 0 degenerates to uniform.
int sample_symbol(Rng& rng, int n, double zipf_s, const std::vector<double>& cdf) {
    if (zipf_s <= 0.0) return static_cast<int>(rng.next_below(static_cast<uint64_t>(n)));
    double u = rng.next_double();
    auto it = std::lower_bound(cdf.begin(), cdf.end(), u);
    int k = static_cast<int>(it - cdf.begin());
    return std::min(k, n - 1);
}

std::vector<double> zipf_cdf(int n, double s) {
    std::vector<double> cdf;
    if (s <= 0.0) return cdf;
    cdf.resize(static_cast<size_t>(n));
    double total = 0.0;
    for (int i = 0; i < n; ++i) total += 1.0 / std::pow(static_cast<double>(i + 1), s);
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        acc += 1.0 / std::pow(static_cast<double>(i + 1), s) / total;
        cdf[static_cast<size_t>(i)] = acc;
    }
    return cdf;
}

}  // namespace

Corpus gen_domain_corpus(const DomainSpec& spec, uint64_t seed) {
    if (spec.vocab_subset.empty()) throw InputError("gen_domain_corpus: empty vocab subset");
    if (spec.len_min < 1 || spec.len_max < spec.len_min) throw InputError("gen_domain_corpus: bad len_range");

    Rng rng(hash_combine(seed, splitmix64(std::hash<std::string>{}(spec.name))));
    const int n_sym = static_cast<int>(spec.vocab_subset.size());
    const auto cdf = zipf_cdf(n_sym, spec.zipf_s);

    std::unordered_set<std::string> seen;
    auto gen_split = [&](int count) {
        std::vector<SentencePair> out;
        out.reserve(static_cast<size_t>(count));
        int attempts = 0;
        while (static_cast<int>(out.size()) < count) {
            int len = spec.len_min + static_cast<int>(rng.next_below(
                          static_cast<uint64_t>(spec.len_max - spec.len_min + 1)));
            std::vector<std::string> src;
            src.reserve(static_cast<size_t>(len));
            for (int i = 0; i < len; ++i) {
                src.push_back(spec.vocab_subset[static_cast<size_t>(sample_symbol(rng, n_sym, spec.zipf_s, cdf))]);
            }
            std::string key = join_tokens(src);
            if (seen.count(key)) {
                // The sequence space can be small for short len ranges; give up
                // on uniqueness only after heavy rejection.
                if (++attempts > 200 * count) throw InputError("gen_domain_corpus: sequence space exhausted for " + spec.name);
                continue;
            }
            seen.insert(key);
            out.push_back(SentencePair{src, apply_rule(spec, src)});
        }
        return out;
    };

    Corpus corpus;
    corpus.train = gen_split(spec.n_train);
    corpus.dev = gen_split(spec.n_dev);
    corpus.test = gen_split(spec.n_test);
    return corpus;
}

Vocabulary build_vocab(const std::vector<const Corpus*>& corpora) {
    if (corpora.empty()) throw InputError("build_vocab: no corpora");
    std::set<std::string> symbols;
    for (const Corpus* c : corpora) {
        for (const auto* split : {&c->train, &c->dev, &c->test}) {
            for (const auto& pair : *split) {
                symbols.insert(pair.src.begin(), pair.src.end());
                symbols.insert(pair.tgt.begin(), pair.tgt.end());
            }
        }
    }
    Vocabulary vocab;
    vocab.add_symbols(std::vector<std::string>(symbols.begin(), symbols.end()));
    return vocab;
}

std::vector<EncodedPair> encode_corpus(const Vocabulary& vocab, const std::vector<SentencePair>& pairs) {
    std::vector<EncodedPair> out;
    out.reserve(pairs.size());
    for (const auto& p : pairs) {
        EncodedPair e;
        e.src = vocab.encode(p.src);
        std::vector<int> tgt = vocab.encode(p.tgt);
        e.tgt_in.reserve(tgt.size() + 1);
        e.tgt_in.push_back(kBosId);
        e.tgt_in.insert(e.tgt_in.end(), tgt.begin(), tgt.end());
        e.tgt_out = tgt;
        e.tgt_out.push_back(kEosId);
        out.push_back(std::move(e));
    }
    return out;
}

BatchIterator::BatchIterator(const std::vector<EncodedPair>& data, int batch_size, uint64_t seed)
    : data_(&data), batch_size_(batch_size), seed_(seed) {
    if (batch_size < 1) throw InputError("batch_iter: batch_size must be >= 1");
    if (data.empty()) throw InputError("batch_iter: empty corpus");
    order_.resize(data.size());
    for (size_t i = 0; i < order_.size(); ++i) order_[i] = i;
}

void BatchIterator::start_epoch(int epoch) {
    for (size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    Rng rng(hash_combine(seed_, static_cast<uint64_t>(epoch)));
    rng.shuffle(order_);
    cursor_ = 0;
}

int BatchIterator::batches_per_epoch() const {
    return static_cast<int>((data_->size() + static_cast<size_t>(batch_size_) - 1) /
                            static_cast<size_t>(batch_size_));
}

bool BatchIterator::next(PaddedBatch& out) {
    if (cursor_ >= order_.size()) return false;
    size_t end = std::min(cursor_ + static_cast<size_t>(batch_size_), order_.size());
    out.items.clear();
    out.src_padded.clear();
    out.tgt_in_padded.clear();
    out.tgt_out_padded.clear();
    out.src_mask.clear();
    out.tgt_mask.clear();

    size_t max_src = 0, max_tgt = 0;
    for (size_t i = cursor_; i < end; ++i) {
        const EncodedPair& p = (*data_)[order_[i]];
        out.items.push_back(p);
        max_src = std::max(max_src, p.src.size());
        max_tgt = std::max(max_tgt, p.tgt_in.size());
    }
    for (const auto& p : out.items) {
        std::vector<int> s(max_src, kPadId), ti(max_tgt, kPadId), to(max_tgt, kPadId);
        std::vector<uint8_t> sm(max_src, 0), tm(max_tgt, 0);
        std::copy(p.src.begin(), p.src.end(), s.begin());
        std::copy(p.tgt_in.begin(), p.tgt_in.end(), ti.begin());
        std::copy(p.tgt_out.begin(), p.tgt_out.end(), to.begin());
        std::fill(sm.begin(), sm.begin() + static_cast<long>(p.src.size()), 1);
        std::fill(tm.begin(), tm.begin() + static_cast<long>(p.tgt_in.size()), 1);
        out.src_padded.push_back(std::move(s));
        out.tgt_in_padded.push_back(std::move(ti));
        out.tgt_out_padded.push_back(std::move(to));
        out.src_mask.push_back(std::move(sm));
        out.tgt_mask.push_back(std::move(tm));
    }
    cursor_ = end;
    return true;
}

std::vector<std::string> split_tokens(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream iss(line);
    std::string tok;
    while (iss >> tok) out.push_back(tok);
    return out;
}

std::string join_tokens(const std::vector<std::string>& tokens) {
    std::string out;
    for (size_t i = 0; i < tokens.size(); ++i) {
        if (i) out += ' ';
        out += tokens[i];
    }
    return out;
}

std::vector<SentencePair> load_pairs_tsv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open corpus file: " + path);
    std::vector<SentencePair> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto tab = line.find('\t');
        if (tab == std::string::npos) throw InputError("corpus line missing tab separator in " + path);
        out.push_back(SentencePair{split_tokens(line.substr(0, tab)), split_tokens(line.substr(tab + 1))});
    }
    return out;
}

std::vector<SentencePair> load_pairs_aligned(const std::string& src_path, const std::string& tgt_path) {
    std::ifstream src_in(src_path), tgt_in(tgt_path);
    if (!src_in) throw InputError("cannot open corpus file: " + src_path);
    if (!tgt_in) throw InputError("cannot open corpus file: " + tgt_path);
    std::vector<SentencePair> out;
    std::string src_line, tgt_line;
    while (std::getline(src_in, src_line)) {
        if (!std::getline(tgt_in, tgt_line)) throw InputError("aligned corpora have different lengths");
        out.push_back(SentencePair{split_tokens(src_line), split_tokens(tgt_line)});
    }
    if (std::getline(tgt_in, tgt_line)) throw InputError("aligned corpora have different lengths");
    return out;
}

void save_pairs_tsv(const std::string& path, const std::vector<SentencePair>& pairs) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write corpus file: " + path);
    for (const auto& p : pairs) {
        out << join_tokens(p.src) << '\t' << join_tokens(p.tgt) << '\n';
    }
}

double token_jaccard(const Corpus& a, const Corpus& b) {
    std::set<std::string> sa, sb;
    for (const auto& p : a.train) {
        sa.insert(p.src.begin(), p.src.end());
        sa.insert(p.tgt.begin(), p.tgt.end());
    }
    for (const auto& p : b.train) {
        sb.insert(p.src.begin(), p.src.end());
        sb.insert(p.tgt.begin(), p.tgt.end());
    }
    size_t inter = 0;
    for (const auto& s : sa) inter += sb.count(s);
    size_t uni = sa.size() + sb.size() - inter;
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace fmalloc
