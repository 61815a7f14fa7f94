#pragma once

#include <cstdint>
#include <vector>

#include "spkv/tensor.hpp"

namespace spkv {

struct Batch {
  std::vector<int> tokens;
  std::vector<std::uint8_t> loss_mask;  // 1 where the token is a supervised target
  int B = 0;
  int T = 0;
};

// Reverse a list of two-digit numbers after a long instruction gap:
//   [BOS] n0 SEP n1 SEP ... n_{N-1} | filler x instruction_len | n_{N-1} SEP ... n0
// Each number is a single token (0..99); only the output half carries loss,
// which is exactly 2N-1 positions (N numbers + N-1 separators).
struct PalindromeSpec {
  int n_numbers = 8;
  int instruction_len = 50;
  int n_number_tokens = 100;

  int sep_token() const { return n_number_tokens; }
  int bos_token() const { return n_number_tokens + 1; }
  int filler_base() const { return n_number_tokens + 2; }
  int n_filler_tokens() const { return 10; }
  int seq_len() const { return 1 + 2 * (2 * n_numbers - 1) + instruction_len; }
  int masked_count() const { return 2 * n_numbers - 1; }
  int min_vocab() const { return filler_base() + n_filler_tokens(); }
  void validate() const;
};

std::vector<int> encode_palindrome(const PalindromeSpec& spec, const std::vector<int>& numbers);
// Recovers the input numbers; throws if the stream is not a well-formed example.
std::vector<int> decode_palindrome(const PalindromeSpec& spec, const std::vector<int>& tokens);
Batch gen_palindrome_batch(const PalindromeSpec& spec, int batch, Rng& rng);

// Reference loss under uniform guessing of numbers and perfect separators.
float chance_nll(const PalindromeSpec& spec);

// Echo a short list immediately: [BOS] n0..n_{N-1} SEP n0..n_{N-1}.
struct CopySpec {
  int n_numbers = 8;
  int n_number_tokens = 100;

  int sep_token() const { return n_number_tokens; }
  int bos_token() const { return n_number_tokens + 1; }
  int seq_len() const { return 2 * n_numbers + 2; }
  int min_vocab() const { return n_number_tokens + 2; }
};

Batch gen_copy_batch(const CopySpec& spec, int batch, Rng& rng);

// Recall one planted (key, value) pair buried in filler:
//   [BOS] f f ... KEY val f f ... QUERY val
struct NeedleSpec {
  int haystack_len = 60;  // filler slots, two of which become KEY val
  int n_number_tokens = 100;

  int key_token() const { return n_number_tokens; }
  int query_token() const { return n_number_tokens + 1; }
  int bos_token() const { return n_number_tokens + 2; }
  int filler_token() const { return n_number_tokens + 3; }
  int seq_len() const { return 1 + haystack_len + 2; }
  int min_vocab() const { return n_number_tokens + 4; }
};

Batch gen_needle_batch(const NeedleSpec& spec, int batch, Rng& rng);

}  // namespace spkv
