#include "spkv/tasks.hpp"

#include <cmath>
#include <stdexcept>

namespace spkv {

void PalindromeSpec::validate() const {
  if (n_numbers < 1) throw std::runtime_error("palindrome spec: n_numbers must be >= 1");
  if (instruction_len < 0) throw std::runtime_error("palindrome spec: instruction_len must be >= 0");
  if (n_number_tokens < 2) throw std::runtime_error("palindrome spec: need at least 2 number tokens");
}

std::vector<int> encode_palindrome(const PalindromeSpec& spec, const std::vector<int>& numbers) {
  spec.validate();
  if (static_cast<int>(numbers.size()) != spec.n_numbers)
    throw std::runtime_error("encode_palindrome: wrong number count");
  for (int n : numbers)
    if (n < 0 || n >= spec.n_number_tokens)
      throw std::runtime_error("encode_palindrome: number out of range");
  std::vector<int> toks;
  toks.reserve(static_cast<std::size_t>(spec.seq_len()));
  toks.push_back(spec.bos_token());
  for (int i = 0; i < spec.n_numbers; ++i) {
    if (i) toks.push_back(spec.sep_token());
    toks.push_back(numbers[static_cast<std::size_t>(i)]);
  }
  for (int i = 0; i < spec.instruction_len; ++i)
    toks.push_back(spec.filler_base() + i % spec.n_filler_tokens());
  for (int i = spec.n_numbers - 1; i >= 0; --i) {
    toks.push_back(numbers[static_cast<std::size_t>(i)]);
    if (i) toks.push_back(spec.sep_token());
  }
  return toks;
}

std::vector<int> decode_palindrome(const PalindromeSpec& spec, const std::vector<int>& tokens) {
  if (static_cast<int>(tokens.size()) != spec.seq_len())
    throw std::runtime_error("decode_palindrome: wrong length");
  std::size_t p = 0;
  if (tokens[p++] != spec.bos_token()) throw std::runtime_error("decode_palindrome: missing BOS");
  std::vector<int> numbers;
  for (int i = 0; i < spec.n_numbers; ++i) {
    if (i && tokens[p++] != spec.sep_token())
      throw std::runtime_error("decode_palindrome: missing separator in input half");
    const int n = tokens[p++];
    if (n < 0 || n >= spec.n_number_tokens)
      throw std::runtime_error("decode_palindrome: bad number token");
    numbers.push_back(n);
  }
  for (int i = 0; i < spec.instruction_len; ++i) {
    if (tokens[p++] != spec.filler_base() + i % spec.n_filler_tokens())
      throw std::runtime_error("decode_palindrome: corrupted instruction segment");
  }
  for (int i = spec.n_numbers - 1; i >= 0; --i) {
    if (tokens[p++] != numbers[static_cast<std::size_t>(i)])
      throw std::runtime_error("decode_palindrome: output half is not the reversal");
    if (i && tokens[p++] != spec.sep_token())
      throw std::runtime_error("decode_palindrome: missing separator in output half");
  }
  return numbers;
}

Batch gen_palindrome_batch(const PalindromeSpec& spec, int batch, Rng& rng) {
  spec.validate();
  if (batch < 1) throw std::runtime_error("gen_palindrome_batch: batch must be >= 1");
  const int T = spec.seq_len();
  Batch out;
  out.B = batch;
  out.T = T;
  out.tokens.reserve(static_cast<std::size_t>(batch) * T);
  out.loss_mask.assign(static_cast<std::size_t>(batch) * T, 0);
  std::vector<int> numbers(static_cast<std::size_t>(spec.n_numbers));
  for (int b = 0; b < batch; ++b) {
    for (int& n : numbers)
      n = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(spec.n_number_tokens)));
    std::vector<int> toks = encode_palindrome(spec, numbers);
    out.tokens.insert(out.tokens.end(), toks.begin(), toks.end());
    const int out_start = T - spec.masked_count();
    for (int t = out_start; t < T; ++t)
      out.loss_mask[static_cast<std::size_t>(b) * T + t] = 1;
  }
  return out;
}

float chance_nll(const PalindromeSpec& spec) {
  const double n = spec.n_numbers;
  return static_cast<float>(n * std::log(static_cast<double>(spec.n_number_tokens)) /
                            (2.0 * n - 1.0));
}

Batch gen_copy_batch(const CopySpec& spec, int batch, Rng& rng) {
  if (batch < 1) throw std::runtime_error("gen_copy_batch: batch must be >= 1");
  const int T = spec.seq_len();
  Batch out;
  out.B = batch;
  out.T = T;
  out.tokens.reserve(static_cast<std::size_t>(batch) * T);
  out.loss_mask.assign(static_cast<std::size_t>(batch) * T, 0);
  for (int b = 0; b < batch; ++b) {
    out.tokens.push_back(spec.bos_token());
    std::vector<int> numbers(static_cast<std::size_t>(spec.n_numbers));
    for (int& n : numbers)
      n = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(spec.n_number_tokens)));
    for (int n : numbers) out.tokens.push_back(n);
    out.tokens.push_back(spec.sep_token());
    for (int n : numbers) out.tokens.push_back(n);
    for (int t = spec.n_numbers + 2; t < T; ++t)
      out.loss_mask[static_cast<std::size_t>(b) * T + t] = 1;
  }
  return out;
}

Batch gen_needle_batch(const NeedleSpec& spec, int batch, Rng& rng) {
  if (batch < 1) throw std::runtime_error("gen_needle_batch: batch must be >= 1");
  if (spec.haystack_len < 2) throw std::runtime_error("gen_needle_batch: haystack too short");
  const int T = spec.seq_len();
  Batch out;
  out.B = batch;
  out.T = T;
  out.tokens.reserve(static_cast<std::size_t>(batch) * T);
  out.loss_mask.assign(static_cast<std::size_t>(batch) * T, 0);
  for (int b = 0; b < batch; ++b) {
    const int val = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(spec.n_number_tokens)));
    // KEY occupies slot pos, val slot pos+1
    const int pos = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(spec.haystack_len - 1)));
    out.tokens.push_back(spec.bos_token());
    for (int i = 0; i < spec.haystack_len; ++i) {
      if (i == pos) out.tokens.push_back(spec.key_token());
      else if (i == pos + 1) out.tokens.push_back(val);
      else out.tokens.push_back(spec.filler_token());
    }
    out.tokens.push_back(spec.query_token());
    out.tokens.push_back(val);
    out.loss_mask[static_cast<std::size_t>(b) * T + (T - 1)] = 1;
  }
  return out;
}

}  // namespace spkv
